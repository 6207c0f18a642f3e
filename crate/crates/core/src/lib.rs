//! Attention-only speech quality prediction from raw waveforms.
//!
//! The network frames a 16 kHz waveform into 2 ms tokens, runs a cascade of
//! shifted-context attention blocks with max-pool merging, prepends a
//! learnable `[MOS]` token, attends globally, and regresses the `[MOS]`
//! embedding to a scalar score. Training supports a rating-spread-weighted
//! loss and staged self-teaching where later models learn from a convex
//! blend of dataset labels and earlier predictions.

pub mod audio;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod kv;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
