use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("mass matrix is not positive definite")]
    SingularMass,

    #[error("constraint Gram matrix is singular{} ({detail})", at_step(*.step))]
    SingularGram { step: Option<usize>, detail: String },

    #[error(
        "implicit midpoint did not converge{}: residual {residual:.3e} after {iterations} iterations",
        at_step(*.step)
    )]
    NoConvergence {
        residual: f64,
        iterations: usize,
        step: Option<usize>,
    },

    #[error("manifold projection failed{}: {detail} (residual {residual:.3e})", at_step(*.step))]
    Projection {
        residual: f64,
        step: Option<usize>,
        detail: String,
    },

    #[error("non-finite value{}: {what}", at_step(*.step))]
    NonFinite { what: String, step: Option<usize> },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("{path}:{line}: {detail}")]
    Malformed {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("corrupt weight archive: {0}")]
    CorruptArchive(String),

    #[error("trajectory {id}: {source}")]
    InTrajectory { id: u64, source: Box<Error> },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn at_step(step: Option<usize>) -> String {
    match step {
        Some(k) => format!(" at step {k}"),
        None => String::new(),
    }
}

impl Error {
    pub fn non_finite(what: impl Into<String>) -> Self {
        Error::NonFinite {
            what: what.into(),
            step: None,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attaches a step index to errors that carry one, keeping the first index set.
    pub fn at_step(self, k: usize) -> Self {
        match self {
            Error::SingularGram { step: None, detail } => Error::SingularGram {
                step: Some(k),
                detail,
            },
            Error::NoConvergence {
                residual,
                iterations,
                step: None,
            } => Error::NoConvergence {
                residual,
                iterations,
                step: Some(k),
            },
            Error::Projection {
                residual,
                step: None,
                detail,
            } => Error::Projection {
                residual,
                step: Some(k),
                detail,
            },
            Error::NonFinite { what, step: None } => Error::NonFinite {
                what,
                step: Some(k),
            },
            other => other,
        }
    }

    pub fn in_trajectory(self, id: u64) -> Self {
        Error::InTrajectory {
            id,
            source: Box::new(self),
        }
    }

    /// Numerical failures: non-convergence, singular systems, non-finite values.
    pub fn is_numerical(&self) -> bool {
        if let Error::InTrajectory { source, .. } = self {
            return source.is_numerical();
        }
        matches!(
            self,
            Error::SingularMass
                | Error::SingularGram { .. }
                | Error::NoConvergence { .. }
                | Error::Projection { .. }
                | Error::NonFinite { .. }
        )
    }
}
