use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Invalid hyper-parameters or layer layouts.
    #[error("configuration error: {0}")]
    Config(String),

    /// Non-finite values or a diverging run.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A caller broke a documented precondition (shapes, tapes, batch sizes).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("schedule construction failed: {0}")]
    Schedule(String),

    #[error("time {t} is not on the schedule grid")]
    OffGrid { t: f64 },

    #[error("eta {eta} is too large: injected variance {sigma_sq} exceeds 1 - alpha_bar = {limit}")]
    InvalidEta { eta: f64, sigma_sq: f64, limit: f64 },

    #[error("step must move toward the data: lambda goes from {from} to {to}")]
    StepDirection { from: f64, to: f64 },

    #[error("order fit failed: {0}")]
    Fit(String),

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    /// Training aborted; `iteration` is the first iteration that failed.
    #[error("training diverged at iteration {iteration}: {reason}")]
    Diverged { iteration: usize, reason: String },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
