//! Minimal floating-point image containers shared by the pipeline.
//!
//! Intensities are stored as `f32` in `[0, 1]`. Continuous coordinates use
//! the corner convention: pixel `(i, j)` covers `[i, i+1) x [j, j+1)` and its
//! center sits at `(i + 0.5, j + 0.5)`.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid(format!(
                "buffer of {} values does not match {width}x{height}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Pixel lookup with coordinates clamped to the border.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f32 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.get(x, y)
    }

    /// Bilinear sample at a continuous (corner convention) position, replicating
    /// the border outside the image.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f32 {
        let fx = x - 0.5;
        let fy = y - 0.5;
        let x0 = fx.floor();
        let y0 = fy.floor();
        let ax = (fx - x0) as f32;
        let ay = (fy - y0) as f32;
        let (x0, y0) = (x0 as isize, y0 as isize);
        let p00 = self.get_clamped(x0, y0);
        let p10 = self.get_clamped(x0 + 1, y0);
        let p01 = self.get_clamped(x0, y0 + 1);
        let p11 = self.get_clamped(x0 + 1, y0 + 1);
        let top = p00 + (p10 - p00) * ax;
        let bottom = p01 + (p11 - p01) * ax;
        top + (bottom - top) * ay
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn mean(&self) -> f32 {
        if self.data.is_empty() {
            return 0.0;
        }
        (self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64) as f32
    }

    /// Resample to `width x height` by bilinear interpolation at target pixel centers.
    pub fn resize(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        // Box prefilter for strong downscaling so that thin structures survive.
        let src = if sx >= 2.0 || sy >= 2.0 {
            self.box_downscale((sx.floor() as usize).max(1), (sy.floor() as usize).max(1))
        } else {
            self.clone()
        };
        let sx = src.width as f64 / width as f64;
        let sy = src.height as f64 / height as f64;
        Self::from_fn(width, height, |x, y| {
            src.sample_bilinear((x as f64 + 0.5) * sx, (y as f64 + 0.5) * sy)
        })
    }

    fn box_downscale(&self, fx: usize, fy: usize) -> Self {
        let w = (self.width / fx).max(1);
        let h = (self.height / fy).max(1);
        Self::from_fn(w, h, |x, y| {
            let mut acc = 0.0f32;
            let mut n = 0usize;
            for yy in y * fy..((y + 1) * fy).min(self.height) {
                for xx in x * fx..((x + 1) * fx).min(self.width) {
                    acc += self.get(xx, yy);
                    n += 1;
                }
            }
            acc / n.max(1) as f32
        })
    }

    /// Separable Gaussian blur with an odd kernel size and explicit sigma.
    pub fn gaussian_blur(&self, ksize: usize, sigma: f64) -> Self {
        let kernel = gaussian_kernel(ksize, sigma);
        let r = (ksize / 2) as isize;
        let tmp = Self::from_fn(self.width, self.height, |x, y| {
            kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * self.get_clamped(x as isize + i as isize - r, y as isize))
                .sum()
        });
        Self::from_fn(self.width, self.height, |x, y| {
            kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * tmp.get_clamped(x as isize, y as isize + i as isize - r))
                .sum()
        })
    }

    /// Rotate by `degrees` (counter-clockwise on screen) about the image center.
    pub fn rotate(&self, degrees: f64) -> Self {
        let (s, c) = degrees.to_radians().sin_cos();
        let cx = self.width as f64 / 2.0;
        let cy = self.height as f64 / 2.0;
        Self::from_fn(self.width, self.height, |x, y| {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            // inverse mapping, y axis points down
            let sx = c * dx - s * dy;
            let sy = s * dx + c * dy;
            self.sample_bilinear(cx + sx, cy + sy)
        })
    }

    /// Centered crop covering `factor` of each side, resized back to the original size.
    pub fn center_crop_resize(&self, factor: f64) -> Self {
        let cw = ((self.width as f64 * factor).round() as usize).clamp(1, self.width);
        let ch = ((self.height as f64 * factor).round() as usize).clamp(1, self.height);
        let x0 = (self.width - cw) / 2;
        let y0 = (self.height - ch) / 2;
        let crop = Self::from_fn(cw, ch, |x, y| self.get(x0 + x, y0 + y));
        crop.resize(self.width, self.height)
    }

    pub fn to_u8(&self) -> image::GrayImage {
        let buf = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::GrayImage::from_raw(self.width as u32, self.height as u32, buf)
            .expect("dimensions match buffer")
    }

    pub fn from_u8(img: &image::GrayImage) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_u8().save(path)?;
        Ok(())
    }
}

pub fn gaussian_kernel(ksize: usize, sigma: f64) -> Vec<f32> {
    let r = (ksize / 2) as f64;
    let w: Vec<f64> = (0..ksize)
        .map(|i| {
            let d = i as f64 - r;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| (v / s) as f32).collect()
}

/// Interleaved RGB image, channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<[f32; 3]>,
}

impl RgbImage {
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        self.data[y * self.width + x]
    }

    pub fn pixels(&self) -> &[[f32; 3]] {
        &self.data
    }

    pub fn sample_bilinear(&self, x: f64, y: f64) -> [f32; 3] {
        let fx = x - 0.5;
        let fy = y - 0.5;
        let x0 = fx.floor();
        let y0 = fy.floor();
        let ax = (fx - x0) as f32;
        let ay = (fy - y0) as f32;
        let cl = |xx: f64, yy: f64| {
            let xi = (xx as isize).clamp(0, self.width as isize - 1) as usize;
            let yi = (yy as isize).clamp(0, self.height as isize - 1) as usize;
            self.get(xi, yi)
        };
        let p00 = cl(x0, y0);
        let p10 = cl(x0 + 1.0, y0);
        let p01 = cl(x0, y0 + 1.0);
        let p11 = cl(x0 + 1.0, y0 + 1.0);
        let mut out = [0f32; 3];
        for c in 0..3 {
            let top = p00[c] + (p10[c] - p00[c]) * ax;
            let bottom = p01[c] + (p11[c] - p01[c]) * ax;
            out[c] = top + (bottom - top) * ay;
        }
        out
    }

    /// ITU-R BT.601 luminance.
    /// Per-channel bilinear resize, same sampling as [`GrayImage::resize`].
    pub fn resize(&self, width: usize, height: usize) -> Self {
        let planes: Vec<GrayImage> = (0..3)
            .map(|c| GrayImage::from_fn(self.width, self.height, |x, y| self.get(x, y)[c]).resize(width, height))
            .collect();
        Self::from_fn(width, height, |x, y| [planes[0].get(x, y), planes[1].get(x, y), planes[2].get(x, y)])
    }

    pub fn to_gray(&self) -> GrayImage {
        let data = self
            .data
            .iter()
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect();
        GrayImage {
            width: self.width,
            height: self.height,
            data,
        }
    }

    pub fn map(&self, f: impl Fn([f32; 3]) -> [f32; 3]) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&p| f(p)).collect(),
        }
    }

    pub fn to_u8(&self) -> image::RgbImage {
        let mut buf = Vec::with_capacity(self.data.len() * 3);
        for p in &self.data {
            for c in p {
                buf.push((c.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        image::RgbImage::from_raw(self.width as u32, self.height as u32, buf)
            .expect("dimensions match buffer")
    }

    pub fn from_u8(img: &image::RgbImage) -> Self {
        let data = img
            .pixels()
            .map(|p| {
                [
                    p[0] as f32 / 255.0,
                    p[1] as f32 / 255.0,
                    p[2] as f32 / 255.0,
                ]
            })
            .collect();
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data,
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_u8().save(path)?;
        Ok(())
    }
}

impl From<&GrayImage> for RgbImage {
    fn from(g: &GrayImage) -> Self {
        Self {
            width: g.width,
            height: g.height,
            data: g.data.iter().map(|&v| [v, v, v]).collect(),
        }
    }
}

/// Either channel layout, as read from disk.
#[derive(Debug, Clone)]
pub enum AnyImage {
    Gray(GrayImage),
    Rgb(RgbImage),
}

impl AnyImage {
    pub fn open(path: &Path) -> Result<Self> {
        let img = image::open(path)?;
        Ok(match img {
            image::DynamicImage::ImageLuma8(g) => AnyImage::Gray(GrayImage::from_u8(&g)),
            other => AnyImage::Rgb(RgbImage::from_u8(&other.to_rgb8())),
        })
    }

    pub fn to_gray(&self) -> GrayImage {
        match self {
            AnyImage::Gray(g) => g.clone(),
            AnyImage::Rgb(c) => c.to_gray(),
        }
    }

    pub fn to_rgb(&self) -> RgbImage {
        match self {
            AnyImage::Gray(g) => RgbImage::from(g),
            AnyImage::Rgb(c) => c.clone(),
        }
    }

    pub fn width(&self) -> usize {
        match self {
            AnyImage::Gray(g) => g.width(),
            AnyImage::Rgb(c) => c.width(),
        }
    }

    pub fn height(&self) -> usize {
        match self {
            AnyImage::Gray(g) => g.height(),
            AnyImage::Rgb(c) => c.height(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        match self {
            AnyImage::Gray(g) => g.save_png(path),
            AnyImage::Rgb(c) => c.save_png(path),
        }
    }
}
