// `!(x > 0.0)` is used on purpose: it also rejects NaN. Index loops mirror the
// matrix algebra.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod admittance;
pub mod cli;
pub mod era;
pub mod error;
pub mod experiments;
pub mod lti;
pub mod plant;
mod poly;
pub mod ratfit;
pub mod signals;

pub use error::{Error, Result};
