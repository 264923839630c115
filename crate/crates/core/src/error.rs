use numcore::NumError;
use thiserror::Error;

use crate::objectives::LossBreakdown;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("configuration error: {field}: {message}")]
    Config { field: String, message: String },
    #[error("sequence length {len} exceeds max_len {max_len}")]
    Length { len: usize, max_len: usize },
    #[error("empty sequence at row {row}")]
    EmptySequence { row: usize },
    #[error("unknown token `{0}`")]
    Vocabulary(String),
    #[error("infeasible corpus spec: {0}")]
    Spec(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("non-finite loss at step {step}: {breakdown}")]
    NonFinite { step: u64, breakdown: LossBreakdown },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
