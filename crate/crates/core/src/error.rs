use pcis_sdp::SdpError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("matrix is not symmetric (relative deviation {0:e})")]
    NotSymmetric(f64),

    #[error("matrix is not positive semidefinite (eigenvalue {min:e} against scale {scale:e})")]
    NotPsd { min: f64, scale: f64 },

    #[error("matrix is singular: {0}")]
    Singular(String),

    #[error("probability level {0} outside [0, 1)")]
    InvalidProbability(f64),

    #[error("{0}")]
    InvalidArgument(String),

    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error("least-squares regressor is rank deficient; unidentifiable directions: {0}")]
    RankDeficient(String),

    #[error("hyperparameter optimization failed for output {output}: {reason}")]
    FitFailed { output: usize, reason: String },

    #[error("synthesis infeasible: {0}")]
    Infeasible(String),

    #[error("malformed document: {0}")]
    Format(String),

    #[error(transparent)]
    Sdp(#[from] SdpError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            found,
        })
    }
}

pub(crate) fn check_probability(p: f64) -> Result<()> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::InvalidProbability(p))
    }
}
