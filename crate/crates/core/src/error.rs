use std::io;
use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("cannot read {path}: {source}")]
    File { path: PathBuf, source: io::Error },

    #[error("unknown relation `{0}`")]
    UnknownRelation(String),

    #[error("unknown UPOS tag `{0}`")]
    UnknownTag(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid model: {0}")]
    Model(String),

    #[error("model has no matrix for relation {0}")]
    MissingRelation(crate::corpus::RelationId),

    #[error("non-finite log-probability component `{0}`")]
    NonFinite(&'static str),

    #[error("definition `{0}` has no token sequence")]
    MissingTokens(String),

    #[error("negative sampling: {0}")]
    Sampling(String),

    #[error("records mix scorers `{0}` and `{1}`")]
    MixedScorers(String, String),

    #[error("need at least two paired observations, got {0}")]
    InsufficientPairs(usize),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}
