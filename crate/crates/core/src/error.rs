use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid bounding box ({x_min}, {y_min}, {x_max}, {y_max}): min must be < max")]
    InvalidBox {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
    },

    #[error("box outside image")]
    BoxOutsideImage,

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("degenerate placement: {0}")]
    DegeneratePlacement(String),

    #[error("rejection budget exhausted after {attempts} attempts ({detail})")]
    RejectionBudget { attempts: usize, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no decoder model for class {0}")]
    MissingModel(u32),

    #[error("non-finite loss during {stage}: {detail}")]
    NonFinite { stage: &'static str, detail: String },

    #[error("bad model file: {0}")]
    BadModelFile(String),

    #[error("unsupported model file version {found} (expected {expected})")]
    ModelVersion { found: u32, expected: u32 },

    #[error("bad raster file: {0}")]
    BadRaster(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("png: {0}")]
    Png(String),

    #[error("empty result set")]
    EmptyResults,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
