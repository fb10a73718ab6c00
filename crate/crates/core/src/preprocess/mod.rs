//! Edge extraction and augmented view generation.

mod augment;
mod edges;

pub use augment::{
    make_view_inputs, make_view_pair, render_view, sample_augmentation, view_affine, vignette, Affine2,
    AugmentConfig, AugmentParams, PhotometricParams, ViewPair, ViewTransform,
};
pub use edges::{median_thresholds, to_edge_map, Canny, EdgeDetector, EdgeImage, Sobel};
