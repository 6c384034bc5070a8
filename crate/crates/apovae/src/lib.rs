//! File formats and command-line front end for [`apovae_core`].
//!
//! * [`checkpoint`]: the binary checkpoint (`APOVAE01` magic, JSON header,
//!   little-endian `f64` tensors).
//! * [`config`]: JSON configs with `key=value` overrides.
//! * [`data`]: plain-text and depth-labelled corpus files.
//! * [`log`]: the per-iteration metrics CSV.
//! * [`cli`]: the `apovae` binary.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod log;

pub use error::{Error, Result};
