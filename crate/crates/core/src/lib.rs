//! Offsite-tuning toolkit for small decoder-only language models.
//!
//! The crate estimates per-layer importance with a sampled layer-replacement
//! policy while training low-rank replacement blocks, compresses frozen
//! layers with selective SVD rank reduction, assembles emulators, and
//! simulates the model-owner / data-owner tuning exchange end to end.

pub mod config;
pub mod corpus;
pub mod emulator;
pub mod error;
pub mod layerreplace;
pub mod model;
pub mod numerics;
pub mod protocol;

pub use error::{CheckpointError, Error, Result};
