// `!(x > 0.0)` style checks are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod association;
pub mod cli;
pub mod consistency;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fusion;
pub mod ingest;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod sim;

pub use error::{Error, Result};
