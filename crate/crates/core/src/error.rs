use thiserror::Error;

/// Errors raised anywhere in the library.
///
/// Every variant carries a stable machine-readable [`code`](Error::code) so
/// command-line front ends can print a single parsable line.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("index {index} out of range for vocabulary of size {size}")]
    Lookup { index: usize, size: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("missing annotation: {0}")]
    MissingAnnotation(String),
    #[error("incompatible inputs: {0}")]
    Compatibility(String),
    #[error("empty keys: attention needs at least one key")]
    EmptyKeys,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "E_DIMENSION",
            Error::Lookup { .. } => "E_LOOKUP",
            Error::Config(_) => "E_CONFIG",
            Error::Contract(_) => "E_CONTRACT",
            Error::Parse { .. } => "E_PARSE",
            Error::Validation(_) => "E_VALIDATION",
            Error::MissingAnnotation(_) => "E_MISSING_ANNOTATION",
            Error::Compatibility(_) => "E_COMPATIBILITY",
            Error::EmptyKeys => "E_EMPTY_KEYS",
            Error::Io { .. } => "E_IO",
            Error::Json(_) => "E_JSON",
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
