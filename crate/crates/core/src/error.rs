use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("render error: {0}")]
    Render(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("numeric error at step {step} (t={timestep}): {message}")]
    Numeric {
        step: usize,
        timestep: usize,
        message: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short category label used in CLI error text.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::Contract(_) => "contract",
            Error::Render(_) => "render",
            Error::Degenerate(_) => "degenerate",
            Error::InsufficientData(_) => "insufficient-data",
            Error::Numeric { .. } => "numeric",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
            Error::Serde(_) => "serde",
        }
    }

    /// Process exit code for the CLI; every category maps to a distinct nonzero value.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Shape(_) => 3,
            Error::Contract(_) => 4,
            Error::Render(_) => 5,
            Error::Degenerate(_) => 6,
            Error::InsufficientData(_) => 7,
            Error::Numeric { .. } => 8,
            Error::Checkpoint(_) => 9,
            Error::Io { .. } => 10,
            Error::Serde(_) => 11,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Config(e.to_string())
    }
}
