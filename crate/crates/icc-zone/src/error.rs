use thiserror::Error;

/// Errors produced by the simulation and estimation pipeline.
#[derive(Debug, Error)]
pub enum IccError {
    #[error("signal too short: {len} samples, need at least {min}")]
    SignalTooShort { len: usize, min: usize },

    #[error("band count mismatch: {left} vs {right}")]
    BandMismatch { left: usize, right: usize },

    #[error("sample rate mismatch: {left} Hz vs {right} Hz")]
    SampleRateMismatch { left: f64, right: f64 },

    #[error("probe too short: normal equations are rank-deficient")]
    ProbeTooShort,

    #[error("recursive CTF must be strictly causal")]
    NotStrictlyCausal,

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("position outside room: {0}")]
    OutsideRoom(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("zero loop delay: the closed loop cannot be evaluated sample-recursively")]
    ZeroLoopDelay,

    #[error("silent probe")]
    SilentProbe,

    #[error("calibration target unreachable: {0}")]
    CalibrationUnreachable(String),

    #[error("unsupported wav file: {0}")]
    UnsupportedWav(String),

    #[error("empty frame set")]
    EmptyFrameSet,

    #[error("source too short: {0}")]
    SourceTooShort(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, IccError>;
