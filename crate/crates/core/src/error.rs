use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("waveform too short: {got} samples, receptive field needs {need}")]
    WaveformTooShort { got: usize, need: usize },

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimMismatch {
        expected: usize,
        got: usize,
        context: String,
    },

    #[error("mask index {index} out of range for {len} frames")]
    MaskIndexOutOfRange { index: usize, len: usize },

    #[error("operation requires the {required} variant, model is {actual}")]
    UnsupportedVariant { required: String, actual: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("training diverged at epoch {epoch} (encoder_lr={encoder_lr:e}, downstream_lr={downstream_lr:e}): {message}")]
    Diverged {
        epoch: usize,
        encoder_lr: f64,
        downstream_lr: f64,
        message: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
