use autosplat_scene::SceneError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("degenerate covariance{}", index.map(|i| format!(" for Gaussian {i}")).unwrap_or_default())]
    DegenerateCovariance { index: Option<usize> },
    #[error("empty supervision mask for region {region}")]
    EmptyRegion { region: String },
    #[error("invalid size: {0}")]
    InvalidSize(String),
    #[error("invalid reflection axis: {0}")]
    InvalidAxis(String),
    #[error("unknown object id {id}; valid ids: {valid:?}")]
    UnknownObject { id: u16, valid: Vec<u16> },
    #[error("frame {frame} outside 0..{count}")]
    FrameOutOfRange { frame: usize, count: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error("unsupported {what} version {found} (supported: {supported})")]
    UnsupportedVersion {
        what: &'static str,
        found: u32,
        supported: u32,
    },
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CoreError>;
