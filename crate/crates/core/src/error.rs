use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("baseline window is empty")]
    EmptyBaselineWindow,
    #[error("window {start}..{end} lies outside a series of {len} samples")]
    WindowOutOfRange {
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("analysis window holds {periods} periods of the tone; an integer count is required")]
    NonCoherentWindow { periods: f64 },
    #[error("frequency {frequency} Hz is at or above the Nyquist frequency {nyquist} Hz")]
    AboveNyquist { frequency: f64, nyquist: f64 },
    #[error("reference signal is constant; NRMSE is undefined")]
    DegenerateReference,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid parameter {field}: {reason}")]
    InvalidParameters { field: String, reason: String },
    #[error("simulation diverged at t = {t} s")]
    SimulationDiverged { t: f64 },
    #[error("equilibrium not found (per-unit residual {residual:e})")]
    EquilibriumNotFound { residual: f64 },
    #[error("plant is not at equilibrium before the perturbation (drift {drift:e} of nominal)")]
    NotAtEquilibrium { drift: f64 },
    #[error("not enough data: {required} samples required, {available} available")]
    NotEnoughData { required: usize, available: usize },
    #[error("requested order {order} exceeds the numerical rank {rank} of the Hankel matrix")]
    OrderExceedsRank { order: usize, rank: usize },
    #[error("discrete eigenvalue {re}{im:+}j lies on the negative real axis; the matrix logarithm is ambiguous (lower the order or raise the sample rate)")]
    LogBranchAmbiguity { re: f64, im: f64 },
    #[error("least-squares problem is rank deficient (condition estimate {condition:e}); lower the model order")]
    IllConditionedFit { condition: f64 },
    #[error("input is not exciting: {dropped} of {total} grid frequencies dropped")]
    InputNotExciting { dropped: usize, total: usize },
    #[error("transfer function evaluated at a pole (f = {frequency} Hz)")]
    EvaluationAtPole { frequency: f64 },
    #[error("transfer function is improper (numerator degree {num} > denominator degree {den})")]
    ImproperTransferFunction { num: usize, den: usize },
    #[error("band {lo}..{hi} Hz lies outside the valid range {valid_lo}..{valid_hi} Hz")]
    BandOutOfRange {
        lo: f64,
        hi: f64,
        valid_lo: f64,
        valid_hi: f64,
    },
    #[error("channel {channel}: {source}")]
    Channel {
        channel: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn invalid(field: &str, reason: impl Into<String>) -> Self {
        Error::InvalidParameters {
            field: field.to_string(),
            reason: reason.into(),
        }
    }

    /// Wraps an error with the admittance channel it came from.
    pub fn in_channel(self, channel: impl std::fmt::Display) -> Self {
        Error::Channel {
            channel: channel.to_string(),
            source: Box::new(self),
        }
    }
}
