use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unknown experiment id `{0}`")]
    UnknownExperiment(String),

    #[error("unknown item id `{0}`")]
    UnknownItem(String),

    #[error("unknown case id `{0}`")]
    UnknownCase(String),

    #[error("column has {0} observation(s); at least 2 are needed to fit a marginal")]
    UnderObserved(usize),

    #[error("empty matrix")]
    EmptyMatrix,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("no reference item configured")]
    NoReference,

    #[error("parse error in {location}: {message}")]
    Parse { location: String, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
