#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::large_enum_variant)]

pub mod anchors;
pub mod bench;
pub mod cli;
pub mod detector;
pub mod error;
pub mod eval;
pub mod imaging;
pub mod netgraph;
pub mod optim;
pub mod postprocess;
pub mod quantize;
pub mod tensor;

pub use error::{Error, Result};
