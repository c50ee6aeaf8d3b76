use thiserror::Error;

pub type Result<T> = std::result::Result<T, HingeError>;

#[derive(Debug, Error)]
pub enum HingeError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("illegal structure: {0}")]
    Legality(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("structural divergence: {0}")]
    Structural(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HingeError {
    pub fn dim(msg: impl Into<String>) -> Self {
        HingeError::Dimension(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        HingeError::Numeric(msg.into())
    }

    pub fn legality(msg: impl Into<String>) -> Self {
        HingeError::Legality(msg.into())
    }
}
