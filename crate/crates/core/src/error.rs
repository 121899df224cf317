use thiserror::Error;

/// Errors shared by all modules of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// All raw weights vanished (likelihood underflow before log-space shift,
    /// or non-finite innovations).
    #[error("degenerate weights")]
    DegenerateWeights,

    #[error("sample too small")]
    SampleTooSmall,

    /// Requested integration span is not an integer multiple of the model step.
    #[error("incommensurate step")]
    IncommensurateStep,

    /// Time step violates the CFL stability bound.
    #[error("unstable step")]
    UnstableStep,

    #[error("no wet cells")]
    NoWetCells,

    #[error("gain solve failed: {0}")]
    GainSolveFailed(String),

    #[error("optimal transport: {0}")]
    Transport(String),

    #[error("linear algebra: {0}")]
    LinearAlgebra(String),
}

pub type Result<T> = std::result::Result<T, Error>;
