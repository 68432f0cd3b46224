use thiserror::Error;

/// Structural problems detected before any numerical work starts.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum SdpError {
    #[error("constraint `{constraint}` references undeclared variable #{var}")]
    UndeclaredVariable { constraint: String, var: usize },

    #[error("constraint `{constraint}`: {detail}")]
    ShapeMismatch { constraint: String, detail: String },

    #[error("constraint `{constraint}` is not symmetric (diagonal block {block} deviates by {deviation:e})")]
    AsymmetricConstraint {
        constraint: String,
        block: usize,
        deviation: f64,
    },

    #[error("unknown variable `{0}`")]
    UnknownVariable(String),

    #[error("log-det target `{0}` must be a symmetric variable")]
    LogDetTargetNotSymmetric(String),

    #[error("invalid solver settings: {0}")]
    InvalidSettings(String),
}
