//! View-pair generation with exact geometric provenance.
//!
//! Each view is rendered by inverse warping: a view pixel position is mapped
//! through an [`Affine2`] into the source image and sampled bilinearly. That
//! same affine is what the location-based matching uses later, so the
//! photometric steps never touch it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::edges::{Canny, EdgeDetector, EdgeImage};
use crate::error::{Error, Result};
use crate::image::GrayImage;

/// 2x3 affine map `[a b c; d e f]` taking `(x, y)` to `(a x + b y + c, d x + e y + f)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine2(pub [[f64; 3]; 2]);

impl Affine2 {
    pub const IDENTITY: Affine2 = Affine2([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);

    pub fn scale(s: f64) -> Self {
        Affine2([[s, 0.0, 0.0], [0.0, s, 0.0]])
    }

    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.0;
        (m[0][0] * x + m[0][1] * y + m[0][2], m[1][0] * x + m[1][1] * y + m[1][2])
    }

    pub fn det(&self) -> f64 {
        self.0[0][0] * self.0[1][1] - self.0[0][1] * self.0[1][0]
    }

    pub fn is_degenerate(&self) -> bool {
        let d = self.det();
        !d.is_finite() || d.abs() < 1e-12 || self.0.iter().flatten().any(|v| !v.is_finite())
    }

    pub fn inverse(&self) -> Result<Self> {
        if self.is_degenerate() {
            return Err(Error::invalid("affine transform is not invertible"));
        }
        let [[a, b, c], [d, e, f]] = self.0;
        let det = self.det();
        let (ia, ib, id, ie) = (e / det, -b / det, -d / det, a / det);
        Ok(Affine2([[ia, ib, -(ia * c + ib * f)], [id, ie, -(id * c + ie * f)]]))
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Affine2) -> Affine2 {
        let [[a, b, c], [d, e, f]] = self.0;
        let [[p, q, r], [s, t, u]] = other.0;
        Affine2([
            [a * p + b * s, a * q + b * t, a * r + b * u + c],
            [d * p + e * s, d * q + e * t, d * r + e * u + f],
        ])
    }

    /// Uniform scale and rotation (degrees) of the linear part, assuming it is
    /// a scaled rotation.
    pub fn scale_rotation(&self) -> (f64, f64) {
        let [[a, _, _], [d, _, _]] = self.0;
        (a.hypot(d), d.atan2(a).to_degrees())
    }
}

/// Photometric settings actually applied to a view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhotometricParams {
    pub brightness: f64,
    pub contrast: f64,
    /// Zero when no noise was added.
    pub noise_sigma: f64,
    pub blur_applied: bool,
    pub vignette_applied: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewTransform {
    /// View pixel coordinates to source pixel coordinates (corner convention).
    pub affine: Affine2,
    pub photometric: PhotometricParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub view_a: EdgeImage,
    pub view_b: EdgeImage,
    pub transform_a: ViewTransform,
    pub transform_b: ViewTransform,
}

/// Augmentation ranges. Key names follow the usual augmentation vocabulary;
/// [`AugmentConfig::paper_defaults`] holds the reference values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Side of the rendered views (the model input).
    pub output_size: usize,
    /// Translation bound in meters on the ground; converted with the source resolution.
    pub translation_m: f64,
    pub rotation_deg: f64,
    pub crop_scale_min: f64,
    pub crop_scale_max: f64,
    pub brightness_min: f64,
    pub brightness_max: f64,
    pub contrast_min: f64,
    pub contrast_max: f64,
    pub noise_sigma: f64,
    pub noise_p: f64,
    pub blur_kernel: usize,
    pub blur_p: f64,
    pub vignette_sigma: f64,
    pub vignette_p: f64,
    /// Run edge extraction on the rendered views. Off only for ablations.
    pub edges: bool,
    pub canny: Canny,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self::paper_defaults()
    }
}

impl AugmentConfig {
    pub fn paper_defaults() -> Self {
        Self {
            output_size: 224,
            translation_m: 10.0,
            rotation_deg: 30.0,
            crop_scale_min: 0.70,
            crop_scale_max: 1.00,
            brightness_min: 0.0,
            brightness_max: 2.0,
            contrast_min: 0.0,
            contrast_max: 2.0,
            noise_sigma: 0.05,
            noise_p: 0.5,
            blur_kernel: 5,
            blur_p: 0.5,
            vignette_sigma: 70.0,
            vignette_p: 0.5,
            edges: true,
            canny: Canny::default(),
        }
    }

    /// No geometric or photometric change; views reduce to a resize.
    pub fn identity(output_size: usize) -> Self {
        Self {
            output_size,
            translation_m: 0.0,
            rotation_deg: 0.0,
            crop_scale_min: 1.0,
            crop_scale_max: 1.0,
            brightness_min: 1.0,
            brightness_max: 1.0,
            contrast_min: 1.0,
            contrast_max: 1.0,
            noise_p: 0.0,
            blur_p: 0.0,
            vignette_p: 0.0,
            ..Self::paper_defaults()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.output_size >= 16
            && self.translation_m >= 0.0
            && self.rotation_deg >= 0.0
            && 0.0 < self.crop_scale_min
            && self.crop_scale_min <= self.crop_scale_max
            && self.crop_scale_max <= 1.0
            && 0.0 <= self.brightness_min
            && self.brightness_min <= self.brightness_max
            && 0.0 <= self.contrast_min
            && self.contrast_min <= self.contrast_max
            && self.noise_sigma >= 0.0
            && self.blur_kernel % 2 == 1
            && self.vignette_sigma > 0.0
            && [self.noise_p, self.blur_p, self.vignette_p].iter().all(|p| (0.0..=1.0).contains(p));
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid augmentation config: {self:?}")))
        }
    }
}

/// One draw of augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    /// Source pixels.
    pub translation_px: (f64, f64),
    pub rotation_deg: f64,
    pub crop_scale: f64,
    /// Crop center as a fraction of the admissible range per axis, in `[0, 1]`.
    pub crop_center: (f64, f64),
    pub brightness: f64,
    pub contrast: f64,
    pub noise: bool,
    pub blur: bool,
    pub vignette: bool,
    pub noise_seed: u64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            translation_px: (0.0, 0.0),
            rotation_deg: 0.0,
            crop_scale: 1.0,
            crop_center: (0.5, 0.5),
            brightness: 1.0,
            contrast: 1.0,
            noise: false,
            blur: false,
            vignette: false,
            noise_seed: 0,
        }
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Draws one parameter set. Translation is uniform in `±translation_m /
/// meters_per_pixel` source pixels per axis.
pub fn sample_augmentation(rng: &mut ChaCha8Rng, config: &AugmentConfig, meters_per_pixel: f64) -> Result<AugmentParams> {
    if !(meters_per_pixel > 0.0) {
        return Err(Error::invalid(format!("meters per pixel must be > 0, got {meters_per_pixel}")));
    }
    let t = config.translation_m / meters_per_pixel;
    Ok(AugmentParams {
        translation_px: (uniform(rng, -t, t), uniform(rng, -t, t)),
        rotation_deg: uniform(rng, -config.rotation_deg, config.rotation_deg),
        crop_scale: uniform(rng, config.crop_scale_min, config.crop_scale_max),
        crop_center: (rng.random::<f64>(), rng.random::<f64>()),
        brightness: uniform(rng, config.brightness_min, config.brightness_max),
        contrast: uniform(rng, config.contrast_min, config.contrast_max),
        noise: rng.random::<f64>() < config.noise_p,
        blur: rng.random::<f64>() < config.blur_p,
        vignette: rng.random::<f64>() < config.vignette_p,
        noise_seed: rng.random(),
    })
}

/// Affine taking view coordinates (`output_size` square) to source
/// coordinates for a square source of side `source_size`.
pub fn view_affine(params: &AugmentParams, source_size: usize, output_size: usize) -> Affine2 {
    let n = source_size as f64;
    let side = params.crop_scale * n;
    let cx = side / 2.0 + params.crop_center.0 * (n - side);
    let cy = side / 2.0 + params.crop_center.1 * (n - side);
    let k = side / output_size as f64;
    let (s, c) = params.rotation_deg.to_radians().sin_cos();
    let half = output_size as f64 / 2.0;
    let (a, b, d, e) = (k * c, -k * s, k * s, k * c);
    let tx = cx + params.translation_px.0 - (a * half + b * half);
    let ty = cy + params.translation_px.1 - (d * half + e * half);
    Affine2([[a, b, tx], [d, e, ty]])
}

/// Multiplies by a centered Gaussian `exp(-r^2 / (2 sigma^2))`, centered on
/// pixel `(w/2, h/2)` (integer division) so the center pixel is unchanged.
pub fn vignette(image: &GrayImage, sigma: f64) -> GrayImage {
    let cx = (image.width() / 2) as f64;
    let cy = (image.height() / 2) as f64;
    let denom = 2.0 * sigma * sigma;
    GrayImage::from_fn(image.width(), image.height(), |x, y| {
        let r2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
        (image.get(x, y) as f64 * (-r2 / denom).exp()) as f32
    })
}

fn adjust_brightness_contrast(img: &GrayImage, brightness: f64, contrast: f64) -> GrayImage {
    let b = img.map(|v| (v * brightness as f32).clamp(0.0, 1.0));
    let mean = b.mean();
    b.map(|v| (mean + (v - mean) * contrast as f32).clamp(0.0, 1.0))
}

fn add_noise(img: &GrayImage, sigma: f64, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("sigma >= 0");
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = (*v + normal.sample(&mut rng) as f32).clamp(0.0, 1.0);
    }
    out
}

/// Renders one view: warp, brightness/contrast, noise, blur, vignette, then
/// edge extraction (when enabled in the config).
pub fn render_view(
    source: &GrayImage,
    params: &AugmentParams,
    config: &AugmentConfig,
) -> Result<(GrayImage, ViewTransform)> {
    let n = source.width();
    let s = config.output_size;
    let affine = view_affine(params, n, s);
    let mut img = GrayImage::from_fn(s, s, |u, v| {
        let (x, y) = affine.apply(u as f64 + 0.5, v as f64 + 0.5);
        source.sample_bilinear(x, y)
    });
    if params.brightness != 1.0 || params.contrast != 1.0 {
        img = adjust_brightness_contrast(&img, params.brightness, params.contrast);
    }
    let noise_sigma = if params.noise { config.noise_sigma } else { 0.0 };
    if noise_sigma > 0.0 {
        img = add_noise(&img, noise_sigma, params.noise_seed);
    }
    if params.blur {
        // OpenCV's default sigma for the kernel size
        let sigma = 0.3 * ((config.blur_kernel as f64 - 1.0) * 0.5 - 1.0) + 0.8;
        img = img.gaussian_blur(config.blur_kernel, sigma);
    }
    if params.vignette {
        img = vignette(&img, config.vignette_sigma);
    }
    let out = if config.edges {
        config.canny.detect(&img)?.to_gray()
    } else {
        img
    };
    let transform = ViewTransform {
        affine,
        photometric: PhotometricParams {
            brightness: params.brightness,
            contrast: params.contrast,
            noise_sigma,
            blur_applied: params.blur,
            vignette_applied: params.vignette,
        },
    };
    Ok((out, transform))
}

fn check_source(source: &GrayImage, config: &AugmentConfig) -> Result<()> {
    if source.width() != source.height() {
        return Err(Error::invalid(format!(
            "source must be square, got {}x{}",
            source.width(),
            source.height()
        )));
    }
    let min_crop = config.crop_scale_min * source.width() as f64;
    if min_crop < 8.0 {
        return Err(Error::invalid(format!(
            "source of {} px is too small for a {:.0}% crop",
            source.width(),
            config.crop_scale_min * 100.0
        )));
    }
    Ok(())
}

/// Two independently augmented views of one grayscale reference image. All
/// randomness derives from `seed`.
pub fn make_view_pair(source: &GrayImage, config: &AugmentConfig, seed: u64, meters_per_pixel: f64) -> Result<ViewPair> {
    check_source(source, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pa = sample_augmentation(&mut rng, config, meters_per_pixel)?;
    let pb = sample_augmentation(&mut rng, config, meters_per_pixel)?;
    let (ga, ta) = render_view(source, &pa, config)?;
    let (gb, tb) = render_view(source, &pb, config)?;
    Ok(ViewPair {
        view_a: to_binary(&ga),
        view_b: to_binary(&gb),
        transform_a: ta,
        transform_b: tb,
    })
}

/// Same as [`make_view_pair`] but returns the raw model inputs, which are
/// grayscale when edge extraction is disabled.
pub fn make_view_inputs(
    source: &GrayImage,
    config: &AugmentConfig,
    seed: u64,
    meters_per_pixel: f64,
) -> Result<[(GrayImage, ViewTransform); 2]> {
    check_source(source, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pa = sample_augmentation(&mut rng, config, meters_per_pixel)?;
    let pb = sample_augmentation(&mut rng, config, meters_per_pixel)?;
    Ok([render_view(source, &pa, config)?, render_view(source, &pb, config)?])
}

fn to_binary(g: &GrayImage) -> EdgeImage {
    let px = g.data().iter().map(|&v| u8::from(v >= 0.5)).collect();
    EdgeImage::from_binary(g.width(), g.height(), px).expect("sizes match")
}
