use std::path::PathBuf;

/// Errors surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid box (cx={cx}, cy={cy}, w={w}, h={h})")]
    InvalidBox { cx: f64, cy: f64, w: f64, h: f64 },

    #[error("image has no ground truth instances")]
    NoGroundTruth,

    #[error("more ground truths ({gts}) than queries ({queries})")]
    TooManyGroundTruths { gts: usize, queries: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("prompt box below resolution: no token centers inside {0:?}")]
    PromptBelowResolution(crate::geometry::Box),

    #[error("class {0} has no entries in the prompt pool")]
    ClassNotInPool(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("checksum mismatch for {what}: expected {expected:08x}, got {actual:08x}")]
    Checksum {
        what: String,
        expected: u32,
        actual: u32,
    },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
