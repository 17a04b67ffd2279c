//! Cross-modal alignment of neural and visual embeddings with neuromimetic
//! image views, evidence-weighted fusion and feedback-regulated blur.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the common instantiations.

pub mod alignment;
pub mod error;
pub mod experiment;
pub mod features;
pub mod fusion;
pub mod image;
pub mod linalg;
pub mod regulator;
pub mod retrieval;
pub mod rng;
pub mod scalar;
pub mod transforms;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Image32 = image::Image<f32>;
pub type Image64 = image::Image<f64>;
pub type Matrix32 = linalg::Matrix<f32>;
pub type Matrix64 = linalg::Matrix<f64>;
pub type FusionParams32 = fusion::FusionParams<f32>;
pub type FusionParams64 = fusion::FusionParams<f64>;
pub type Model32 = alignment::Model<f32>;
pub type Model64 = alignment::Model<f64>;
pub type BlurSchedule64 = regulator::BlurScheduleState<f64>;
