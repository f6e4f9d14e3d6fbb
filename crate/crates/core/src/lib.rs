//! Dataset distillation by trajectory matching with a constant-memory
//! gradient and train-free soft label assignment.

#![forbid(unsafe_code)]

pub mod augment;
pub mod autodiff;
pub mod binfmt;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod nn;
pub mod parallel;
pub mod tensor;
pub mod train;
pub mod trajectory;

pub use autodiff::{AutodiffError, GraphStats, ScopeToken, Tape, TapeMode, Var};
pub use error::{Error, FormatError, Result};
pub use tensor::{dot, Element, Tensor, TensorError};
