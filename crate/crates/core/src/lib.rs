//! Two-pathway word-level lipreading at desk scale.
//!
//! A windowed "spot" pathway reads a short span of frames centered on the
//! clip middle while a second pathway reads every frame; lateral connections
//! feed the all-frame stream into the windowed stream at matched depth, both
//! inside a 3-D convolutional front-end and between a pair of transformer
//! encoders augmented with product-key memories. A dual temporal-convolution
//! back-end aggregates both streams into word-class logits.
//!
//! The crate covers the whole pipeline: synthetic dataset generation and
//! directory-layout ingestion, preprocessing and seeded augmentation,
//! window-size selection from word-boundary statistics, the model itself,
//! and the three-phase training procedure with its schedulers.

pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod data;
pub mod model;
pub mod error;
pub mod nn;
pub mod pkmem;
pub mod preprocess;
pub mod temporal_conv;
pub mod train;
pub mod tensorio;
pub mod transformer;
pub mod windowing;

pub use error::{Error, Result};
