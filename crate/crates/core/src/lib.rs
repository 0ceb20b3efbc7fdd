//! Two-stage self-supervised video denoising.
//!
//! A blind temporal estimator is trained first on temporal neighbours only;
//! its output anchors a second, non-blind spatial refiner trained through
//! recorruption. Only the refiner is used at inference.

pub mod alignment;
pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod flow;
pub mod inference;
pub mod noise;
pub mod priors;
pub mod rng;
pub mod synth;
pub mod training;
pub mod video;

pub use error::{Error, Result};
