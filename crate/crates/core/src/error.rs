//! Crate-wide error type.

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two operands have incompatible shapes.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// The device count must evenly divide the input feature count.
    #[error("device count N={devices} must divide input feature count D={input_features}")]
    ShardCount { devices: usize, input_features: usize },

    /// A value that must be finite was NaN or infinite.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// An argument was outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A device has no calibration observations yet.
    #[error("device {device} has no calibration observations")]
    Uncalibrated { device: usize },

    /// Calibration produced no usable ranges.
    #[error("degenerate calibration: {0}")]
    DegenerateCalibration(String),

    /// Quantization bit width outside the supported range.
    #[error("bit width {0} out of supported range [2, 8]")]
    InvalidBitWidth(u8),

    /// Requested more high-precision features than exist.
    #[error("selection size k={k} exceeds feature count E={features}")]
    SelectionTooLarge { k: usize, features: usize },

    /// A message was produced against a different codec table.
    #[error("stale codec table: message checksum {message:#018x} != table checksum {table:#018x}")]
    StaleCodecTable { message: u64, table: u64 },

    /// A wire message failed structural validation.
    #[error("malformed message: {0}")]
    MalformedMessage(String),

    /// A file or byte stream violated one of the container formats.
    #[error("format error: {0}")]
    Format(String),

    /// The sync configuration does not match the codec table in use.
    #[error("strategy mismatch: {0}")]
    StrategyMismatch(String),

    /// An internal invariant was violated; this indicates a bug.
    #[error("internal invariant violation: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
