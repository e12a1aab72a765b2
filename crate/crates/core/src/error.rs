//! Crate-level error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("transmitter within {min_dist} m of an array element (near-field degeneracy)")]
    NearFieldTx { min_dist: f64 },

    #[error("degenerate ray bundle: {0}")]
    DegenerateRays(String),

    #[error("mask ratio {ratio} keeps no tokens")]
    EmptyMask { ratio: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("batch mixes scenes: {first} and {second}")]
    MixedScenes { first: String, second: String },

    #[error("missing position label")]
    MissingLabel,

    #[error("empty data split: {0}")]
    EmptySplit(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::DimensionMismatch {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
