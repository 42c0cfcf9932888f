use std::path::PathBuf;

use thiserror::Error;

use crate::inference::Snapshot;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("domain error: {0}")]
    Domain(String),

    /// Cholesky failed at every rung of the jitter ladder.
    #[error("factorization failed after jitter ladder {ladder:?}")]
    Factorization { ladder: Vec<f64> },

    /// A log-likelihood or cache check produced a non-finite or inconsistent
    /// value. `fvals` holds the offending latent values when there are any.
    #[error("numerical failure: {message}")]
    Numerical {
        message: String,
        fvals: Option<Vec<f64>>,
    },

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("config line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("ingestion error at row {row}, column {column}: {message}")]
    Ingestion {
        row: usize,
        column: String,
        message: String,
    },

    #[error("rejection envelope too loose: acceptance rate {rate:.3e} after {proposals} proposals")]
    Envelope { rate: f64, proposals: usize },

    #[error("specification error: {0}")]
    Specification(String),

    #[error("chain aborted at iteration {iteration}: {source}")]
    ChainAborted {
        iteration: usize,
        source: Box<Error>,
        state: Box<Snapshot>,
    },

    #[error("chain file line {line}: {message}")]
    Load { line: usize, message: String },

    #[error("only {succeeded} of {total} replicates succeeded")]
    InsufficientReplicates { succeeded: usize, total: usize },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerical kind (factorization, NaN
    /// likelihoods, aborted chains, sampling envelopes).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Factorization { .. }
                | Error::Numerical { .. }
                | Error::ChainAborted { .. }
                | Error::Envelope { .. }
        )
    }
}
