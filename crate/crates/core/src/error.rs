use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate functional: {0}")]
    DegenerateFunctional(String),

    #[error("oracle regression required")]
    MissingOracle,

    #[error("rank-deficient basis; increase λ or reduce features")]
    RankDeficient,

    #[error("singular penalized system in outcome regression")]
    SingularOutcomeSystem,

    #[error("incompatible balancing scheme and functional: {0}")]
    IncompatibleScheme(String),

    #[error(
        "solver did not converge after {iterations} iterations (gradient norm {grad_norm:.3e})"
    )]
    NotConverged { iterations: usize, grad_norm: f64 },

    #[error("degenerate fold; reduce K or reseed (fold {fold}: {reason})")]
    DegenerateFold { fold: usize, reason: String },

    #[error("replication {rep}, cell {cell}: {source}")]
    Cell {
        rep: usize,
        cell: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: missing column `{column}`")]
    MissingColumn { path: PathBuf, column: String },

    #[error("{path}, row {row}: {message}")]
    BadRow {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
