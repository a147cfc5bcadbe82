use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DspError {
    #[error("transform length {0} is not a power of two")]
    NotPowerOfTwo(usize),
    #[error("window length {0} is too short")]
    WindowTooShort(usize),
    #[error("overlap fraction {0} outside [0, 1)")]
    InvalidOverlap(f64),
    #[error("buffer of {len} samples is shorter than one {frame_length}-sample frame")]
    BufferShorterThanFrame { len: usize, frame_length: usize },
    #[error("sample rate {0} must be positive and finite")]
    InvalidSampleRate(f64),
    #[error("non-finite sample at index {index}")]
    NonFinite { index: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RoomError {
    #[error("{what} at {position:?} is not strictly inside the room {room:?}")]
    OutsideRoom {
        what: &'static str,
        position: [f64; 3],
        room: [f64; 3],
    },
    #[error("microphones coincide")]
    CoincidentMics,
    #[error("source coincides with microphone {0}")]
    SourceOnMic(usize),
    #[error("invalid room parameter: {0}")]
    InvalidParameter(String),
    #[error("source signal is silent; SNR is undefined")]
    SilentSource,
    #[error(transparent)]
    Dsp(#[from] DspError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GccError {
    #[error("spectra lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("correlation is identically zero")]
    Degenerate,
    #[error("max lag {max_lag} exceeds half the transform length {half}")]
    MaxLagTooLarge { max_lag: usize, half: usize },
    #[error("signal is silent")]
    SilentSignal,
    #[error("autocorrelation never falls below half its peak")]
    NoDecay,
    #[error(transparent)]
    Dsp(#[from] DspError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FsGccError {
    #[error("invalid FS-GCC configuration: {0}")]
    InvalidConfig(String),
    #[error("spectrum length {got} does not match configured DFT length {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("matrix shape mismatch: {0}")]
    Shape(String),
    #[error("matrix is identically zero")]
    Degenerate,
}

#[derive(Debug, Error)]
pub enum UNetError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("input spatial dims {0}x{1} must be powers of two")]
    NotPowerOfTwo(usize, usize),
    #[error("batch normalisation needs at least two samples per batch in train mode")]
    BatchTooSmall,
    #[error("operation requires train mode")]
    NotTraining,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("model file: {0}")]
    Format(String),
    #[error("model file I/O on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("WAV parse error at byte {offset}: {message}")]
    Wav { offset: usize, message: String },
    #[error("I/O on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid experiment configuration: {0}")]
    InvalidConfig(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Room(#[from] RoomError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    FsGcc(#[from] FsGccError),
}

impl DatasetError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no records to summarise")]
    Empty,
    #[error("peak index {peak} outside a sequence of {len} lags")]
    PeakOutOfRange { peak: usize, len: usize },
    #[error("correlation time must be positive, got {0}")]
    InvalidCorrelationTime(f64),
    #[error("unknown method '{0}' (expected gcc, svd, wsvd or cnn)")]
    UnknownMethod(String),
}
