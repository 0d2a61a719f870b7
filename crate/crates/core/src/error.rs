use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("point ({row}, {col}) lies outside the {height}x{width} canvas")]
    OutOfBounds {
        row: f64,
        col: f64,
        height: usize,
        width: usize,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("eroded support mask is empty")]
    EmptyErodedMask,
    #[error("alpha mask has no nonzero cell")]
    EmptyAlpha,
    #[error("value outside domain: {0}")]
    Domain(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("record rejected: {0}")]
    RecordRejected(String),
    #[error("dataset generation failed: {0}")]
    GenerationFailure(String),
    #[error("category {category_id} has {count} objects, cannot fill train/val/test")]
    InsufficientObjects { category_id: u32, count: usize },
    #[error("descriptor norm {0:e} is too small to normalize")]
    DegenerateDescriptor(f64),
    #[error("no eligible sample for query record {0}")]
    SamplingExhausted(usize),
    #[error("descriptor store is empty")]
    EmptyIndex,
    #[error("non-finite loss at epoch {epoch} step {step} (state dumped to {dump:?})")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        dump: PathBuf,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error("{path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path:?}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable tag, used by the CLI and the C API.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::OutOfBounds { .. } => "out_of_bounds",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::EmptyErodedMask => "empty_eroded_mask",
            Error::EmptyAlpha => "empty_alpha",
            Error::Domain(_) => "domain",
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::RecordRejected(_) => "record_rejected",
            Error::GenerationFailure(_) => "generation_failure",
            Error::InsufficientObjects { .. } => "insufficient_objects",
            Error::DegenerateDescriptor(_) => "degenerate_descriptor",
            Error::SamplingExhausted(_) => "sampling_exhausted",
            Error::EmptyIndex => "empty_index",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Config(_) => "config",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Json(_) => "json",
        }
    }
}
