use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("data error at point {index}: {reason}")]
    Data { index: usize, reason: String },
    #[error("remap error: {0}")]
    Remap(String),
    #[error("label error: {0}")]
    Label(String),
    #[error("statistics error: {0}")]
    Statistics(String),
    #[error("selection error: {0}")]
    Selection(String),
    #[error("model output error at point {index}: {reason}")]
    ModelOutput { index: usize, reason: String },
    #[error("numeric error in {layer}: {reason}")]
    Numeric { layer: String, reason: String },
    #[error("loss error: {0}")]
    Loss(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Coarse grouping used by front-ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Usage,
            Error::Numeric { .. } | Error::Loss(_) | Error::ModelOutput { .. } => ErrorClass::Numeric,
            _ => ErrorClass::Data,
        }
    }
}
