use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor/layer extents.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A network specification that cannot be built.
    #[error("invalid network spec: {0}")]
    Spec(String),

    /// API misuse, e.g. backpropagating through a stale trace.
    #[error("usage error: {0}")]
    Usage(String),

    /// Non-finite values during training or optimization.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Malformed file contents (weights, manifests, rasters).
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    /// A valid file using a feature outside the supported surface.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Raster lacks usable geo-referencing tags.
    #[error("geo-reference error: {0}")]
    GeoReference(String),

    /// Window extraction crossing the raster boundary.
    #[error("window at pixel ({row}, {col}) of size {size} crosses the raster edge")]
    Edge { row: i64, col: i64, size: usize },

    /// Scene filtering or loading left nothing to composite.
    #[error("empty scene stack: {0}")]
    EmptyStack(String),

    /// Input data rejected by a precondition (band count, empty stack, ...).
    #[error("input error: {0}")]
    Input(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Short stable token naming the error category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Spec(_) => "spec",
            Error::Usage(_) => "usage",
            Error::Numeric(_) => "numeric",
            Error::Format { .. } => "format",
            Error::Unsupported(_) => "unsupported",
            Error::GeoReference(_) => "georeference",
            Error::Edge { .. } => "edge",
            Error::EmptyStack(_) => "empty-stack",
            Error::Input(_) => "input",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
