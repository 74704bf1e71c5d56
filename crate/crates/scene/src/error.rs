use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}:{column}: {path}: {message}")]
    Json {
        file: PathBuf,
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("validation failed at `{field}`: {message}")]
    Validation { field: String, message: String },
    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("point container {path}: {message}")]
    Points { path: PathBuf, message: String },
    #[error("unsupported {what} version {found} (supported: {supported})")]
    UnsupportedVersion {
        what: &'static str,
        found: u32,
        supported: u32,
    },
}

impl SceneError {
    pub fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        SceneError::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SceneError::Io {
            path: path.into(),
            source,
        }
    }
}
