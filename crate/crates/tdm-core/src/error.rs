use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unsupported op kind `{0}`")]
    UnsupportedKind(String),

    #[error("backward needs a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("output has no differentiable graph behind it")]
    DisconnectedGraph,

    #[error("function returned non-finite value {value} while probing element {index}")]
    NonFiniteValue { index: usize, value: f64 },

    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),

    #[error("episode needs {needed} classes, split has {available}")]
    InsufficientClasses { needed: usize, available: usize },

    #[error("class {class_id} has {available} images, episode needs {needed}")]
    InsufficientImages {
        class_id: u32,
        needed: usize,
        available: usize,
    },

    #[error("partition leaves an empty side (base {base}, novel {novel})")]
    DegeneratePartition { base: usize, novel: usize },

    #[error("invalid channel plan: {0}")]
    InvalidPlan(String),

    #[error("prototype needs at least one support map")]
    EmptySupport,

    #[error("inter-class score needs at least two classes")]
    SingleClass,

    #[error("cosine distance undefined for an all-zero map")]
    ZeroVector,

    #[error("label {label} out of range for {n_way}-way episode")]
    LabelOutOfRange { label: usize, n_way: usize },

    #[error("class {class} has {available} instances, variance needs at least 2")]
    InsufficientInstances { class: usize, available: usize },

    #[error("confidence interval needs at least 2 samples, got {0}")]
    InsufficientSamples(usize),

    #[error("non-finite loss {loss} at training step {step}")]
    NonFiniteLoss { step: u64, loss: f64 },

    #[error("bad checkpoint magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error("checkpoint manifest inconsistent: {0}")]
    ManifestMismatch(String),

    #[error("payload truncated: manifest needs {expected} bytes, found {actual}")]
    TruncatedPayload { expected: usize, actual: usize },

    #[error("gradient check failed: max relative error {max_rel_error:.3e} in `{worst}`")]
    ToleranceExceeded { max_rel_error: f64, worst: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
