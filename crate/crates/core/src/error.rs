use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A loss, gradient or intermediate produced a NaN or infinity.
    #[error("numerical failure in {term}: {detail}")]
    Numerical { term: String, detail: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("frame {frame}: {source}")]
    Frame {
        frame: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Self::InvalidArgument(msg.into())
    }

    pub(crate) fn numerical(term: impl Into<String>, detail: impl Into<String>) -> Self {
        Self::Numerical {
            term: term.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Self::Parse {
            line,
            message: message.into(),
        }
    }

    /// Innermost error, looking through per-frame wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Self::Frame { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit status for the command-line runner.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Self::Numerical { .. } => 2,
            _ => 1,
        }
    }
}

pub(crate) fn ensure_finite(term: &str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::numerical(term, format!("value is {value}")))
    }
}
