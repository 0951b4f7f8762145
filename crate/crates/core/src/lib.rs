//! Geometry-grounded trajectory decoding for multi-turn, multi-view dialogue.
//!
//! The crate is `no_std` (it needs `alloc`) and contains only the numerical
//! core: camera and Plücker-ray geometry, ray-time token conditioning, the
//! recurrent target slot, the anchor-plus-residual trajectory decoder, the
//! training objectives with hand-written gradients, and the turn-level
//! evaluation metrics. File formats, corpus generation and the command-line
//! tool live in the `track4d` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod decoder;
pub mod encoding;
mod error;
pub mod geometry;
pub mod learn;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod state;

pub use error::{Error, Result};

/// Number of trajectory steps produced per geometric turn.
pub const HORIZON: usize = 4;
