//! Feed-forward radiance-field engine.
//!
//! Given K posed input images, the pipeline extracts matching-aware features
//! (CNN pyramid + multi-view transformer), gathers per-point colors, features
//! and pairwise similarity cues into a frustum volume aligned with the novel
//! view, decodes a radiance field with a convolutional decoder, and renders by
//! volume compositing. Everything runs on a small self-contained tensor
//! library with reverse-mode autodiff, in f32 for training/inference and f64
//! for gradient checks and analytic oracles.

pub mod error;
pub mod geometry;
pub mod gradsuite;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod model;
pub mod nn;
pub mod render;
pub mod scene;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod volume;

pub use error::Error;
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Result<T> = std::result::Result<T, Error>;
