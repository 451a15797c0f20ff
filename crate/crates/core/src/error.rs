use thiserror::Error;

use crate::dynamics::FullState;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("mirror position {x:e} m collapses the cavity (x must exceed -L0 = {l0:e} m)")]
    Geometry { x: f64, l0: f64 },

    #[error("mode order N + k = {order} is not a physical cavity mode")]
    InvalidModeOrder { order: i64 },

    #[error("numerical blow-up at t = {t:e} s: {what}")]
    Blowup {
        t: f64,
        what: String,
        last_good: Box<FullState>,
    },

    #[error("invalid integrator configuration: {0}")]
    InvalidConfig(String),

    #[error("time step {dt:e} violates the phase constraint: {binding}")]
    StepConstraint { dt: f64, binding: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("singular input: {0}")]
    Singular(String),

    #[error("root finder did not converge: {0}")]
    NoConvergence(String),

    #[error("mirror escaped over the softened spring at x = {x:e} m (potential maximum at ±{barrier:e} m)")]
    Escaped { x: f64, barrier: f64 },

    #[error("kick map ran away after {events} events without a turning point")]
    Runaway { events: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("config line {line}: key `{key}`: {reason}")]
    ConfigParse {
        line: usize,
        key: String,
        reason: String,
    },

    #[error("config is missing required key `{0}`")]
    ConfigMissing(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    /// True for errors raised by a run itself rather than by its inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Blowup { .. }
                | Error::Escaped { .. }
                | Error::Geometry { .. }
                | Error::NoConvergence(_)
                | Error::Runaway { .. }
                | Error::StepConstraint { .. }
        )
    }
}
