//! Uncertainty-aware temporal context fusion of two feature-sequence
//! modalities ("audio" and "text").
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense `f64` tensors with tape-based reverse-mode gradients.
//! - [`encoder`]: GRU encoders, cross-modal attention, grid pooling and the
//!   heteroscedastic latent head.
//! - [`fusion`]: early, late and variance-weighted context fusion.
//! - [`objective`]: task losses and the calibration/ordinality loss.
//! - [`metrics`]: accuracy, macro-F1, ECE, RMSE/MAE and rank correlation.
//! - [`attribution`]: gradient x input attributions with fold intervals.
//! - [`synth`]: synthetic two-modality datasets with a Bayes oracle.
//! - [`model`]: the trainable fusion networks for every strategy.
//! - [`harness`]: training, cross-validation, transfer and reporting.

pub mod attribution;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
