// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod catalog;
pub mod error;
pub mod forecast;
pub mod geometry;
pub mod intensity;
pub mod kernels;
pub mod misd;
pub mod registry;
pub mod simulate;
pub mod triggering;

pub use error::{EtasError, Result};
