use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A document did not match its schema.
    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("backend error ({stage}{}): {message}", object_suffix(*.object))]
    Backend {
        stage: &'static str,
        object: Option<usize>,
        message: String,
    },

    #[error("degenerate segmentation{}: mask is empty", object_suffix_plain(*.object))]
    DegenerateSegmentation { object: Option<usize> },

    #[error("invalid mesh: {0}")]
    Mesh(String),

    #[error("decimation failed: {0}")]
    Decimation(String),

    #[error("provider conformance check `{check}` failed: {detail}")]
    Conformance { check: &'static str, detail: String },

    #[error("optimization diverged at iteration {iteration}: {reason}")]
    Divergence {
        iteration: usize,
        reason: String,
        /// Most recent checkpoint written before the failure, if any.
        last_checkpoint: Option<PathBuf>,
    },

    #[error("export failed for {path}: {message}")]
    Export { path: PathBuf, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

fn object_suffix(object: Option<usize>) -> String {
    match object {
        Some(i) => format!(", object {i}"),
        None => String::new(),
    }
}

fn object_suffix_plain(object: Option<usize>) -> String {
    match object {
        Some(i) => format!(" for object {i}"),
        None => String::new(),
    }
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Error::Validation(message.into())
    }

    /// Attaches an object index to backend and segmentation errors.
    pub fn for_object(self, index: usize) -> Self {
        match self {
            Error::Backend {
                stage,
                object: None,
                message,
            } => Error::Backend {
                stage,
                object: Some(index),
                message,
            },
            Error::DegenerateSegmentation { object: None } => Error::DegenerateSegmentation { object: Some(index) },
            other => other,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Failure reported by an external backend adapter.
#[derive(Debug, Clone, Error)]
#[error("{0}")]
pub struct BackendError(pub String);

impl BackendError {
    pub fn new(message: impl Into<String>) -> Self {
        BackendError(message.into())
    }
}
