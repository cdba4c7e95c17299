//! Post-training quantization of small convolutional and fully connected
//! networks.
//!
//! Activation scales and weight rounding are tuned block by block against
//! the divergence between full-precision and quantized *predictions*, with a
//! feature-reconstruction regularizer and batch-norm guided correction of the
//! calibration activations.

pub mod archive;
pub mod dc;
pub mod error;
pub mod harness;
pub mod quant;
pub mod recon;
pub mod tensor;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod scale_search;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
