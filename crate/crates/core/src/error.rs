//! Error types shared across the crate.

use thiserror::Error;

/// Unified error type for mesh, modal, projection, plant, and harness code.
#[derive(Debug, Error)]
pub enum Error {
    /// A mesh or ellipsoid specification violates its invariants.
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    /// A mesh is structurally broken (inverted tets, open surface, bad indices).
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    /// Not enough input data to perform the operation.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// A request that cannot be satisfied (bad dimensions, out-of-range counts).
    #[error("invalid request: {0}")]
    InvalidRequest(String),

    /// A point that cannot be projected (e.g. coincides with the mesh center).
    #[error("invalid point: {0}")]
    InvalidPoint(String),

    /// Input vectors/matrices with mismatched or non-finite content.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Degenerate geometric input (zero-length polyline, collinear samples).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// The feature projector lost rank; `deficiency` is the number of missing
    /// singular values.
    #[error("rank-deficient projector: {deficiency} deficient of {expected} ({detail})")]
    RankDeficient {
        deficiency: usize,
        expected: usize,
        detail: String,
    },

    /// Numerical failure (eigensolver non-convergence, singular factorization).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Scenario configuration problems detected at load time.
    #[error("scenario config error: {0}")]
    Config(String),

    /// Malformed text input (mesh files, scenario files, basis dumps).
    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
