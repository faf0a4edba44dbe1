//! Transfer-based adversarial attack laboratory: a small reverse-mode
//! autodiff engine, a digit-classification CNN, synthetic domains,
//! training strategies, FGSM crafting and robustness metrics.

pub mod attack;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
