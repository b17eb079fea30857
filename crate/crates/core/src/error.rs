//! Error types shared across the toolkit.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("input vector has near-zero norm ({norm:e}); cannot project to the unit sphere")]
    ZeroVector { norm: f64 },

    #[error("batch contains no same-class pair; alignment loss is undefined")]
    NoPositivePairs,

    #[error("class {class} is absent from the batch; cannot sample a same-class slerp partner")]
    ClassMissing { class: u8 },

    #[error("scores contain a single class only; AUROC is undefined")]
    SingleClass,

    #[error("video has no frames to aggregate")]
    EmptyVideo,

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("pretrained weights unavailable: {0}")]
    WeightsUnavailable(String),

    #[error("unsupported parameter policy: {0}")]
    UnsupportedPolicy(String),

    #[error("{count} fake record(s) lack a resolvable source_id link")]
    MissingSourceLinks { count: usize },

    #[error("no face found in any sampled frame of video '{video_id}'")]
    NoFaceFound { video_id: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("preprocessing fingerprint mismatch: model expects {expected}, manifest '{manifest}' has {got}")]
    FingerprintMismatch {
        expected: String,
        got: String,
        manifest: String,
    },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("non-finite loss at step {step} (total={total}); aborting. {detail}")]
    NonFiniteLoss {
        step: u64,
        total: f64,
        detail: String,
    },

    #[error("unknown detector '{0}'; register it or use the built-in 'stub'")]
    UnknownDetector(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}
