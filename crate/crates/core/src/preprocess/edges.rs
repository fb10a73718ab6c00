use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;

/// Binary edge map; every pixel is 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
    pub source_id: String,
}

impl EdgeImage {
    pub fn from_binary(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::invalid("edge buffer does not match dimensions"));
        }
        if pixels.iter().any(|&p| p > 1) {
            return Err(Error::invalid("edge map must be binary"));
        }
        Ok(Self {
            width,
            height,
            pixels,
            source_id: String::new(),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.pixels.iter().map(|&p| p as usize).sum()
    }

    pub fn with_source(mut self, id: impl Into<String>) -> Self {
        self.source_id = id.into();
        self
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_vec(self.width, self.height, self.pixels.iter().map(|&p| p as f32).collect())
            .expect("sizes match")
    }
}

/// Pluggable edge extractor.
pub trait EdgeDetector: Send + Sync {
    fn detect(&self, image: &GrayImage) -> Result<EdgeImage>;
}

/// Canny thresholds on the 8-bit gradient scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct Canny {
    pub low: f32,
    pub high: f32,
    /// Derive thresholds as (0.66, 1.33) x median intensity instead.
    #[serde(default)]
    pub auto_median: bool,
}

impl Default for Canny {
    fn default() -> Self {
        Self {
            low: 50.0,
            high: 150.0,
            auto_median: false,
        }
    }
}

impl EdgeDetector for Canny {
    fn detect(&self, image: &GrayImage) -> Result<EdgeImage> {
        if self.auto_median {
            let (low, high) = median_thresholds(image);
            to_edge_map(image, low, high)
        } else {
            to_edge_map(image, self.low, self.high)
        }
    }
}

/// Thresholded Sobel gradient magnitude, no thinning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sobel {
    pub threshold: f32,
}

impl EdgeDetector for Sobel {
    fn detect(&self, image: &GrayImage) -> Result<EdgeImage> {
        if image.is_empty() {
            return Err(Error::invalid("empty image"));
        }
        let (gx, gy) = sobel(&image.map(|v| v * 255.0));
        let pixels = gx
            .iter()
            .zip(&gy)
            .map(|(a, b)| u8::from(a.hypot(*b) >= self.threshold))
            .collect();
        EdgeImage::from_binary(image.width(), image.height(), pixels)
    }
}

/// `(0.66, 1.33) x median` of the 8-bit intensities.
pub fn median_thresholds(image: &GrayImage) -> (f32, f32) {
    let mut v: Vec<f32> = image.data().iter().map(|&x| x * 255.0).collect();
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let mid = v.len() / 2;
    let (_, m, _) = v.select_nth_unstable_by(mid, f32::total_cmp);
    let m = *m;
    (0.66 * m, 1.33 * m)
}

fn sobel(img: &GrayImage) -> (Vec<f32>, Vec<f32>) {
    let (w, h) = (img.width(), img.height());
    let mut gx = vec![0f32; w * h];
    let mut gy = vec![0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let p = |dx: isize, dy: isize| img.get_clamped(x as isize + dx, y as isize + dy);
            gx[y * w + x] = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
            gy[y * w + x] = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
        }
    }
    (gx, gy)
}

/// Canny edge detection: Gaussian smoothing (5x5, sigma 1.4), Sobel
/// gradients, non-maximum suppression along the quantized gradient direction,
/// then hysteresis with 8-connectivity. Intensities are taken on the 8-bit
/// scale so thresholds follow the usual conventions.
pub fn to_edge_map(image: &GrayImage, low_threshold: f32, high_threshold: f32) -> Result<EdgeImage> {
    if image.is_empty() {
        return Err(Error::invalid("empty image"));
    }
    if !(0.0 <= low_threshold && low_threshold <= high_threshold) {
        return Err(Error::invalid(format!(
            "thresholds must satisfy 0 <= low <= high, got ({low_threshold}, {high_threshold})"
        )));
    }
    let (w, h) = (image.width(), image.height());
    let smooth = image.map(|v| v * 255.0).gaussian_blur(5, 1.4);
    let (gx, gy) = sobel(&smooth);
    let mag: Vec<f32> = gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect();

    let mut thin = vec![0f32; w * h];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let i = y * w + x;
            let m = mag[i];
            if m == 0.0 {
                continue;
            }
            let mut angle = gy[i].atan2(gx[i]).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            let (a, b) = if !(22.5..157.5).contains(&angle) {
                (i - 1, i + 1)
            } else if angle < 67.5 {
                (i - w - 1, i + w + 1)
            } else if angle < 112.5 {
                (i - w, i + w)
            } else {
                (i - w + 1, i + w - 1)
            };
            if m >= mag[a] && m >= mag[b] {
                thin[i] = m;
            }
        }
    }

    let mut out = vec![0u8; w * h];
    let mut stack = Vec::new();
    for start in 0..w * h {
        if thin[start] < high_threshold || thin[start] == 0.0 || out[start] == 1 {
            continue;
        }
        out[start] = 1;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if out[j] == 0 && thin[j] > 0.0 && thin[j] >= low_threshold {
                        out[j] = 1;
                        stack.push(j);
                    }
                }
            }
        }
    }
    EdgeImage::from_binary(w, h, out)
}
