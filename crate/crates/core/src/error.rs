use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument outside its documented domain.
    #[error("parameter error: {0}")]
    Param(String),

    /// Incompatible tensor shapes.
    #[error("shape error: {0}")]
    Shape(String),

    /// A non-finite value or a failed numerical consistency check.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// An operation invoked in the wrong state (e.g. a missing prompt).
    #[error("state error: {0}")]
    State(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Param(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// Process exit code for this error class: numerical failures map to 2,
    /// everything else to 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) => 2,
            _ => 1,
        }
    }
}
