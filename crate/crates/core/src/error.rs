use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported architecture: {0}")]
    UnsupportedArchitecture(String),

    #[error("manifest record {record}: {reason}")]
    Manifest { record: String, reason: String },

    #[error("checksum mismatch for example {0}")]
    Checksum(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("non-finite {component} at step {step}")]
    NonFiniteSwapLoss { step: u64, component: String },

    #[error("no bias-contrary examples for classes {0:?}")]
    EmptyContraryPool(Vec<usize>),

    #[error("missing ground-truth bias flag for example {0}")]
    MissingGroundTruth(String),

    #[error("id collision: {0}")]
    IdCollision(String),

    #[error("generation failed for {failed} of {total} pairs")]
    GenerationFailed { failed: usize, total: usize },

    #[error("{stage} required")]
    MissingStage { stage: String },

    #[error("stage {stage} failed: {source}")]
    StageFailed { stage: String, source: Box<Error> },

    #[error("config: {0}")]
    Config(String),

    #[error("report schema: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
