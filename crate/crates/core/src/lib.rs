#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod coupled;
pub mod error;
pub mod evaluation;
pub mod linalg;
pub mod matrix_io;
pub mod problem;
pub mod riccati;
pub mod synthesis;

pub use error::{Error, Result};
