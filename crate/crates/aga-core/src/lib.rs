//! Core library for adaptive grouped alignment (AGA) pretraining at desk scale.
//!
//! Everything in this crate is pure computation over heap-allocated `f64`
//! buffers: a minimal reverse-mode differentiation tape, toy image/text
//! encoders, the sparse similarity grouping mechanism with EMA threshold
//! gates, the bidirectional alignment losses, a synthetic paired corpus with
//! planted token-to-patch correspondences, the training loop, and the
//! evaluation protocols. File formats, logging, and the command-line front
//! end live in the companion `aga-cli` crate.
//!
//! The crate is `no_std` (with `alloc`); float transcendentals come from
//! `libm` so forward values are bit-identical across platforms.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod corpus;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod grouping;
pub mod losses;
pub mod rng;
pub mod tape;
pub mod trainer;
pub mod verify;

pub use error::Error;
pub use tape::{Tape, Tensor};

/// Result alias used throughout the crate.
pub type Result<T> = core::result::Result<T, Error>;
