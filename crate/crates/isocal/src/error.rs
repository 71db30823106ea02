//! Crate-wide error type and exit-code mapping for the CLI.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("svd did not converge after {sweeps} sweeps (max off-diagonal ratio {off:.3e})")]
    SvdNoConvergence { sweeps: usize, off: f64 },

    #[error("probe vector is not unit length (|v| = {norm:.12})")]
    NonUnitProbe { norm: f64 },

    #[error("embedding row {row} has near-zero norm {norm:.3e}")]
    DegenerateEmbedding { row: usize, norm: f64 },

    #[error("singular values {k} and {next} are separated by only {gap:.3e} (< {min:.0e})", next = k + 1)]
    DegenerateSpectrum { k: usize, gap: f64, min: f64 },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    #[error("training diverged at {context} (last finite loss {last_loss})")]
    Diverged { context: String, last_loss: f64 },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("no records for the uncalibrated baseline (method 'none')")]
    MissingBaseline,

    #[error("sample too small for a t-test (need at least 2 values, got {n})")]
    SampleTooSmall { n: usize },

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code: 1 usage, 2 I/O or parse, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArg(_) => 1,
            Error::Parse { .. } | Error::Io(_) | Error::MissingBaseline | Error::SampleTooSmall { .. } => 2,
            _ => 3,
        }
    }
}
