use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("input has {len} samples but at least {min} are required")]
    InputTooShort { len: usize, min: usize },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("time {0} is outside [0, 1]")]
    TimeOutOfRange(f64),

    #[error("conditional field is singular at t = {0} (requires t < 1 - 1e-9)")]
    SingularTime(f64),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("mixture density underflows at far-field point {point:?} (t = {t})")]
    FarField { point: Vec<f64>, t: f64 },

    #[error("non-finite value in {context} at step {step}")]
    NonFinite { context: &'static str, step: usize },

    #[error("overlap-add normalization is zero at output sample {0}; window/hop do not cover the signal")]
    ZeroCoverage(usize),

    #[error("sample rate mismatch: expected {expected} Hz, found {found} Hz")]
    SampleRateMismatch { expected: u32, found: u32 },

    #[error("reference signal is silent")]
    SilentReference,

    #[error("unsupported audio format: {0}")]
    UnsupportedAudio(String),

    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Wav(#[from] hound::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: usize, got: usize) -> Self {
        Error::ShapeMismatch {
            context,
            expected,
            got,
        }
    }

    /// True for failures caused by numerics rather than by bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::FarField { .. } | Error::SingularTime(_) | Error::ZeroCoverage(_)
        )
    }
}
