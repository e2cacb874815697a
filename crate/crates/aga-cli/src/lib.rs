//! File formats, configuration, manifests, and command implementations for
//! the `aga` binary. Kept as a library so integration and acceptance tests
//! can drive commands in-process.

pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod hash;
pub mod manifest;

pub use error::CliError;
