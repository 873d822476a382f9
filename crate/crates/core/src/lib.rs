//! A desk-scale laboratory for online test-time adaptation of a binary
//! real/fake image detector.
//!
//! Synthetic images carry genuine upsampling artifacts ([`synthdata`]), are
//! degraded by common postprocessing ([`postprocess`]) and fed to a small
//! BatchNorm classifier ([`nn`]). [`adapt`] updates the classifier online
//! with entropy minimization plus noise-tolerant negative learning
//! ([`ttaloss`]) under gradient masking, and [`bench`] runs the scenarios.

pub mod adapt;
pub mod bench;
pub mod error;
pub mod image;
pub mod matrix;
pub mod metrics;
pub mod nn;
pub mod postprocess;
pub mod scalar;
pub mod seed;
pub mod spectrum;
pub mod synthdata;
pub mod ttaloss;

pub use error::{Error, Result};
pub use image::Image;
pub use matrix::Matrix;
pub use scalar::Scalar;

pub type Matrix64 = matrix::Matrix<f64>;
pub type Matrix32 = matrix::Matrix<f32>;
pub type Spectrum64 = spectrum::Spectrum<f64>;
pub type Spectrum32 = spectrum::Spectrum<f32>;
pub type LossBreakdown64 = ttaloss::LossBreakdown<f64>;
pub type ScoredSet64 = metrics::ScoredSet<f64>;
