use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Error type shared by every pipeline stage.
///
/// Variants are grouped by the stage that raises them so callers can tell a
/// bad input file from a transport failure without string matching.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("unknown preset \"{name}\" (valid presets: carla, robot)")]
    UnknownPreset { name: String },

    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },

    #[error("track {id} has a gap at index {index}")]
    TrackGap { id: u64, index: usize },

    #[error("invalid track {id}: {message}")]
    InvalidTrack { id: u64, message: String },

    #[error("assignment input: {0}")]
    Assignment(String),

    #[error("detection: {0}")]
    Detection(String),

    #[error("detector request for frame {frame} failed: {message}")]
    DetectorTransport { frame: usize, message: String },

    #[error("vlm transport: {0}")]
    VlmTransport(String),

    #[error("vlm response: {message}; raw response: {raw}")]
    VlmParse { message: String, raw: String },

    #[error("saliency: {0}")]
    Saliency(String),

    #[error("feature map: {0}")]
    Feature(String),

    #[error("pipeline: {0}")]
    Pipeline(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("{context}: {source}")]
    Image {
        context: String,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json { context: context.into(), source }
    }

    pub fn image(context: impl Into<String>, source: image::ImageError) -> Self {
        Error::Image { context: context.into(), source }
    }
}
