//! File formats, synthetic corpora and the `track4d` command-line tool
//! built on `track4d-core`.

pub mod bench;
pub mod checkpoint;
pub mod cli;
mod error;
pub mod manifest;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};
