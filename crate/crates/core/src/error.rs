use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    Definiteness { pivot: usize, value: f64 },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: u64, detail: String },

    #[error("integrity error: {detail} (expected {expected}, found {found})")]
    Integrity {
        detail: String,
        expected: String,
        found: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn integrity(detail: impl Into<String>, expected: impl Into<String>, found: impl Into<String>) -> Self {
        Error::Integrity {
            detail: detail.into(),
            expected: expected.into(),
            found: found.into(),
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) => 2,
            Error::Data(_) | Error::Input(_) | Error::Io { .. } | Error::Csv(_) => 3,
            Error::Dimension(_)
            | Error::Graph(_)
            | Error::Definiteness { .. }
            | Error::Numeric(_)
            | Error::Divergence { .. } => 4,
            Error::Integrity { .. } => 5,
        }
    }
}
