use thiserror::Error;

pub type Result<T, E = PanError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PanError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("incomplete coverage: {0}")]
    Coverage(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl PanError {
    /// Process exit code used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            PanError::Shape(_)
            | PanError::Config(_)
            | PanError::Parameter(_)
            | PanError::Contract(_)
            | PanError::Coverage(_) => 2,
            PanError::Format(_) | PanError::Io(_) => 3,
            PanError::Numerical(_) => 4,
        }
    }
}

pub(crate) fn shape_err(msg: impl Into<String>) -> PanError {
    PanError::Shape(msg.into())
}

pub(crate) fn format_err(msg: impl Into<String>) -> PanError {
    PanError::Format(msg.into())
}
