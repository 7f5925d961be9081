//! Efficient beam-tree recursive neural networks.
//!
//! The crate builds latent-tree sentence encoders over a small tape-based
//! autodiff engine: a gated recursive cell, entangled and disentangled pair
//! scorers, greedy and beam search over merge orders, parent attention for
//! token contextualization, a synthetic ListOps task, a training harness,
//! and a retained-activation memory profiler.

pub mod autodiff;
pub mod bench;
pub mod cells;
pub mod checks;
pub mod config;
pub mod error;
pub mod listops;
pub mod memory;
pub mod model;
pub mod parent_attention;
pub mod search;
pub mod train;

pub use error::{Error, Result};
