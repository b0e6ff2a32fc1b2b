// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod error;
pub mod features;
pub mod graph;
pub mod io;
pub mod model;
pub mod train;

pub use error::{DagamError, Result};
