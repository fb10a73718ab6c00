//! Reference-only UAV visual geo-localization.
//!
//! The pipeline builds a heading-aligned reference tile database around a
//! planned flight ([`geodata`]), turns tiles into Canny edge maps and
//! augmented view pairs ([`preprocess`]), pretrains a convolutional
//! autoencoder and fine-tunes its encoder with a VICRegL objective
//! ([`model`], [`losses`], [`training`]), and localizes query images by exact
//! cosine-similarity retrieval ([`retrieval`]) scored with Recall@K at
//! distance thresholds ([`eval`]). No query imagery is used for training.

pub mod error;
pub mod eval;
pub mod geodata;
pub mod image;
pub mod losses;
pub mod model;
pub mod preprocess;
pub mod retrieval;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
