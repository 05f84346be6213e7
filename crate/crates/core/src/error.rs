use std::path::PathBuf;

use thiserror::Error;

/// Error type shared by every stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("invalid raster: {0}")]
    InvalidRaster(String),

    #[error("bundle {path}: {reason}")]
    BadBundle { path: PathBuf, reason: String },

    #[error("missing band {0}")]
    MissingBand(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("model file {path}: {reason}")]
    BadModelFile { path: PathBuf, reason: String },

    #[error("geojson {path}: {reason}")]
    GeoJson { path: PathBuf, reason: String },

    #[error("crs mismatch: {0}")]
    CrsMismatch(String),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub fn bundle(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::BadBundle {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn model_file(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::BadModelFile {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn geojson(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::GeoJson {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Wrap an error with the name of the pipeline stage it came from.
    pub fn in_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
