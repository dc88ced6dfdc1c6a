#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod cluster;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod ground;
pub mod ingest;
pub mod mask;
pub mod pipeline;
pub mod plot;
pub mod refine;
pub mod results;
pub mod scene;
pub mod synth;

pub use error::{Error, Result};
