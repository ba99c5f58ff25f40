use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape error at layer {layer}: {message}")]
    LayerShape { layer: usize, message: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("parse error in segment `{segment}`: {message}")]
    Parse { segment: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {path}: {message}")]
    ImageDecode { path: PathBuf, message: String },

    #[error("unsupported pixel format in {path}: {found}")]
    UnsupportedFormat { path: PathBuf, found: String },

    #[error("malformed sidecar {path}: {message}")]
    MalformedSidecar { path: PathBuf, message: String },

    #[error("schema violation: {0}")]
    Schema(String),

    #[error("infeasible request: {0}")]
    Infeasible(String),

    #[error("backend failure: {0}")]
    Backend(String),
}

impl Error {
    /// Stable machine-readable code for each failure family.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::LayerShape { .. } | Error::Shape(_) => "shape",
            Error::Numeric(_) => "numeric",
            Error::Parse { .. } => "parse",
            Error::Io { .. } => "io",
            Error::ImageDecode { .. } => "image_decode",
            Error::UnsupportedFormat { .. } => "unsupported_format",
            Error::MalformedSidecar { .. } => "malformed_sidecar",
            Error::Schema(_) => "schema",
            Error::Infeasible(_) => "infeasible",
            Error::Backend(_) => "backend",
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
