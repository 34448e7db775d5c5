use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty ground-truth set")]
    EmptyGroundTruth,

    #[error("cannot match {gts} ground-truth boxes onto {slots} slots")]
    TooManyGroundTruths { gts: usize, slots: usize },

    #[error("k-means needs at least {k} distinct boxes, got {distinct}")]
    NotEnoughDistinct { k: usize, distinct: usize },

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// True for errors caused by malformed input files rather than runtime failures.
    pub fn is_format(&self) -> bool {
        matches!(self, Error::Format(_) | Error::Json(_) | Error::Csv(_) | Error::InvalidBox(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
