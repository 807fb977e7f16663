use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed JSON; `offset` is a byte offset into the parsed text.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    /// A field violates a data-model invariant.
    #[error("validation error in `{field}`{}: {message}", fmt_position(*.position))]
    Validation {
        field: &'static str,
        position: Option<usize>,
        message: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// A record failed inside a batch run; `line` is 1-based.
    #[error("record at line {line}{}: {source}", .rollout_id.as_deref().map(|id| format!(" ({id})")).unwrap_or_default())]
    Record {
        line: usize,
        rollout_id: Option<String>,
        source: Box<Error>,
    },

    #[error("empty batch")]
    EmptyBatch,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn fmt_position(position: Option<usize>) -> String {
    match position {
        Some(p) => format!(" at position {p}"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn validation(
        field: &'static str,
        position: impl Into<Option<usize>>,
        message: impl Into<String>,
    ) -> Self {
        Error::Validation {
            field,
            position: position.into(),
            message: message.into(),
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidArgument(message.into())
    }
}
