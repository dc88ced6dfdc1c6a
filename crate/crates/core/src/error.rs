use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid transform: {0}")]
    InvalidTransform(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(&'static str),

    #[error("malformed mask: {0}")]
    MalformedMask(String),

    #[error("mask size mismatch: {a:?} vs {b:?}")]
    MaskSizeMismatch { a: (u32, u32), b: (u32, u32) },

    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),

    #[error("empty point cloud")]
    EmptyCloud,

    #[error("file not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error("schema error{}: {field}: {message}", frame_suffix(*.frame))]
    Schema {
        frame: Option<usize>,
        field: String,
        message: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("classes absent from the class mapping: {}", .0.join(", "))]
    UnmappedClasses(Vec<String>),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

fn frame_suffix(frame: Option<usize>) -> String {
    match frame {
        Some(i) => format!(" (frame {i})"),
        None => String::new(),
    }
}

impl Error {
    pub fn schema(frame: Option<usize>, field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            frame,
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(path)
        } else {
            Error::Io { path, source }
        }
    }

    /// True for errors caused by bad input data rather than a bug or an I/O failure.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::Io { .. })
    }
}
