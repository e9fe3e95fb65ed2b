use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SivError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("dimension {dim} exceeds the maximum of {max}")]
    DimensionOverflow { dim: usize, max: usize },
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },
    #[error("no reflection contrast between electron states anywhere in the scanned window")]
    NoContrast,
    #[error("degenerate objective: {0}")]
    Degenerate(String),
    #[error("target fidelity {target} unreachable; best achievable {max_fidelity:.4}")]
    Unreachable { target: f64, max_fidelity: f64 },
    #[error("herald probability is zero")]
    ZeroHerald,
    #[error("every run was rejected by the flag")]
    AllRejected,
    #[error("missing measurement basis {0}")]
    MissingBasis(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("unknown {kind} `{name}`")]
    Unknown { kind: String, name: String },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("fit failed: {0}")]
    Fit(String),
}

pub type Result<T> = std::result::Result<T, SivError>;

pub(crate) fn invalid(field: &str, reason: impl Into<String>) -> SivError {
    SivError::InvalidParameter {
        field: field.to_string(),
        reason: reason.into(),
    }
}
