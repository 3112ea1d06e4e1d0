//! Compute-elastic patch tokenization for transformer surrogates of
//! time-dependent PDEs.
//!
//! A single model is trained once and can then be run at patch (or stride)
//! sizes 4, 8 and 16, trading accuracy against token count at inference time.

pub mod autodiff;
pub mod container;
pub mod error;
pub mod metrics;
pub mod pdegen;
pub mod piresize;
pub mod processor;
pub mod rollout;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
