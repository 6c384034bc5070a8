//! Adversarial Poincaré variational autoencoder.
//!
//! The crate is `no_std` (with `alloc`). It contains everything that is pure
//! computation:
//!
//! * [`geometry`]: closed-form Poincaré-ball operations on plain vectors.
//! * [`wrapped`]: wrapped normal distributions, the standard prior and the
//!   VampPrior mixture.
//! * [`tensor`] and [`tape`]: a small matrix type and a reverse-mode tape over
//!   it; [`hyp`] re-expresses the ball operations on the tape, batched by row.
//! * [`nn`]: encoder, gyroplane decoder and dual (critic) network.
//! * [`trainer`]: the alternating primal-dual training loop and checkpoints.
//! * [`corpus`] and [`metrics`]: vocabularies, the synthetic tree corpus,
//!   batching and evaluation.
//!
//! File formats and the command-line front end live in the `apovae` crate.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod corpus;
pub mod error;
pub mod geometry;
pub mod hyp;
pub mod math;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod tape;
pub mod tensor;
pub mod toy;
pub mod trainer;
pub mod wrapped;

pub use error::{Error, Result};
pub use geometry::{BallConfig, BallPoint, Gyroplane, TangentVector};
pub use tensor::Matrix;
