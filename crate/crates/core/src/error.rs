use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("shape mismatch at layer {layer} ({kind}): {detail}")]
    LayerShape {
        layer: usize,
        kind: &'static str,
        detail: String,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("invalid label {label} for a {num_classes}-class model")]
    InvalidLabel { label: usize, num_classes: usize },

    #[error("unsupported layer: {0}")]
    UnsupportedLayer(String),

    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("unsupported format version {found} (expected {expected})")]
    BadVersion { found: u32, expected: u32 },

    #[error("truncated payload: {0}")]
    Truncated(String),

    #[error("invalid model bundle: {0}")]
    InvalidBundle(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty batch: {0}")]
    EmptyBatch(&'static str),

    #[error("gamma unreachable: mean ID-Score {reached:.4} < {gamma} at epsilon_max {epsilon_max}")]
    GammaUnreachable {
        gamma: f64,
        epsilon_max: f64,
        reached: f64,
    },

    #[error("training diverged (non-finite loss) in epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("class-count mismatch: model has {model}, calibration expects {calibration}")]
    ClassMismatch { model: usize, calibration: usize },

    #[error("calibration surrogate found in the scored zoo: {0}")]
    SurrogateInZoo(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
