// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiments;
pub mod infobound;
pub mod linalgx;
pub mod models;
pub mod parallel;
pub mod scrub;
pub mod training;

pub use error::{Error, Result};
