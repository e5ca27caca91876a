//! Synthetic massive-MIMO CSI generation, masked transformer reconstruction
//! and the evaluation harness around it.
// NaN must fail range checks, hence the negated comparisons.
#![allow(clippy::neg_cmp_op_on_partial_ord)]


pub mod archive;
pub mod baselines;
pub mod channel;
pub mod check;
pub mod error;
pub mod experiments;
pub mod model;
pub mod preprocess;
pub mod seed;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
