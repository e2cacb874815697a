//! Error type shared by all modules.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Everything that can go wrong inside the core library.
///
/// Variants carry enough context to name the offending shapes, rows, or
/// config fields in the message, which the CLI forwards verbatim.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two operands have incompatible shapes for the named operation.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// An operation required a scalar (shape `[]`) input.
    NotScalar { shape: Vec<usize> },
    /// A softmax row had no unmasked entries.
    FullyMaskedRow { row: usize },
    /// A text sample had no real tokens.
    EmptyMask,
    /// Sparsification threshold outside `[0, 1]`.
    ThresholdOutOfRange { sigma: f64 },
    /// Gate momentum outside `[0, 1)`.
    MomentumOutOfRange { gamma: f64 },
    /// A batch-level operation received no elements.
    EmptyBatch,
    /// An alignment-weight row summed to zero (upstream contract violation).
    ZeroSumRow { row: usize },
    /// A value that must be finite was NaN or infinite.
    NonFinite { context: String },
    /// A token id fell outside the vocabulary.
    TokenOutOfRange { position: usize, id: u32, vocab: u32 },
    /// A config field had an unusable value.
    InvalidConfig { field: &'static str, message: String },
    /// Two sizes that must agree did not.
    DimMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    /// Retrieval cutoff larger than the candidate pool.
    KExceedsPool { k: usize, pool: usize },
    /// A probe label fraction left some class without training samples.
    FractionTooSmall { fraction: f64 },
    /// Classification protocols need at least two classes.
    NeedTwoClasses,
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch between {lhs:?} and {rhs:?}")
            }
            Error::NotScalar { shape } => {
                write!(f, "expected a scalar tensor, got shape {shape:?}")
            }
            Error::FullyMaskedRow { row } => {
                write!(f, "softmax row {row} is fully masked")
            }
            Error::EmptyMask => write!(f, "text sample has an empty token mask"),
            Error::ThresholdOutOfRange { sigma } => {
                write!(f, "sparsification threshold {sigma} outside [0, 1]")
            }
            Error::MomentumOutOfRange { gamma } => {
                write!(f, "gate momentum {gamma} outside [0, 1)")
            }
            Error::EmptyBatch => write!(f, "empty batch"),
            Error::ZeroSumRow { row } => {
                write!(f, "alignment row {row} sums to zero; sparsifier contract violated")
            }
            Error::NonFinite { context } => write!(f, "non-finite value in {context}"),
            Error::TokenOutOfRange { position, id, vocab } => {
                write!(f, "token id {id} at position {position} outside vocab of size {vocab}")
            }
            Error::InvalidConfig { field, message } => {
                write!(f, "invalid config field `{field}`: {message}")
            }
            Error::DimMismatch { what, expected, actual } => {
                write!(f, "{what}: expected {expected}, got {actual}")
            }
            Error::KExceedsPool { k, pool } => {
                write!(f, "retrieval K={k} exceeds candidate pool of {pool}")
            }
            Error::FractionTooSmall { fraction } => {
                write!(f, "label fraction {fraction} leaves a class without training samples")
            }
            Error::NeedTwoClasses => write!(f, "need at least two classes"),
        }
    }
}

impl core::error::Error for Error {}
