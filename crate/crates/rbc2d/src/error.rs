//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("non-finite values in {context}")]
    NonFinite { context: &'static str },

    #[error("unsupported norm order p = {0}")]
    UnsupportedNorm(String),

    #[error(
        "incompatible Neumann data: mean constraint violated \
         (defect {defect:.3e}, scale {scale:.3e}, relative {rel:.3e})"
    )]
    IncompatibleNeumann { defect: f64, scale: f64, rel: f64 },

    #[error("solution blew up at step {step} (t = {time:.6})")]
    BlowUp { step: u64, time: f64 },

    #[error("delta = {delta} not representable on the grid; minimum is {min_delta}")]
    DeltaTooSmall { delta: f64, min_delta: f64 },

    #[error("empty averaging window")]
    EmptyWindow,

    #[error("missing pressure samples for the enstrophy balance")]
    MissingPressure,

    #[error("snapshot: {0}")]
    Snapshot(String),

    #[error("config: {0}")]
    Config(String),

    #[error("fit: {0} (need at least 3 points)")]
    Fit(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParam(msg.into())
    }
}
