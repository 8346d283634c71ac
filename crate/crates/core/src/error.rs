use thiserror::Error;

/// Error type shared across the library.
#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs} vs {rhs}")]
    Dim {
        op: &'static str,
        lhs: String,
        rhs: String,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: u64, msg: String },
    #[error("state error: {0}")]
    State(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("gradient oracle error: {0}")]
    Oracle(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(op: &'static str, lhs: impl std::fmt::Display, rhs: impl std::fmt::Display) -> Self {
        Error::Dim {
            op,
            lhs: lhs.to_string(),
            rhs: rhs.to_string(),
        }
    }
}
