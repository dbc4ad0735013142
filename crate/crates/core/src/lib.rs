// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod matrix;
pub mod model;
pub mod modelfile;
pub mod sigproc;
pub mod train;

pub use error::{Error, Result};
pub use matrix::Matrix;
