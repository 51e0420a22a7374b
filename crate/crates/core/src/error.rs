use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value in {0}")]
    NonFiniteValue(String),
    #[error("sample has no target clips")]
    EmptyTargetSet,
    #[error("sample has no seen clips")]
    EmptySeenSet,
    #[error("sequence of {len} clips exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },

    #[error("denoising steps must be at least 1")]
    InvalidSteps,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("sigma {0} outside [0, 1]")]
    SigmaOutOfRange(f64),
    #[error("sigma must strictly decrease, got {from} -> {to}")]
    NonDecreasingSigma { from: f64, to: f64 },
    #[error("rotary embedding needs an even head dimension, got {0}")]
    OddHeadDim(usize),
    #[error("position {pos} outside max_len {max_len}")]
    PositionOutOfRange { pos: usize, max_len: usize },
    #[error("invalid model config: {0}")]
    InvalidModelConfig(String),

    #[error("loss became non-finite at step {0}")]
    NonFiniteLoss(usize),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),
    #[error("blob range {offset}..{end} outside blob of {len} bytes")]
    OffsetOutOfRange { offset: u64, end: u64, len: u64 },
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),

    #[error("task head mismatch: {0}")]
    TaskHeadMismatch(String),
    #[error("unknown sweep axis `{0}`")]
    UnknownSweepAxis(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by diverging numerics rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFiniteValue(_) | Error::NonFiniteLoss(_))
    }
}
