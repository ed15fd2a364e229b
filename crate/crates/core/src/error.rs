use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("at optical power {power_w:e} W: {source}")]
    AtPower {
        power_w: f64,
        #[source]
        source: Box<SimError>,
    },

    #[error("at pulse {index}: {source}")]
    AtPulse {
        index: usize,
        #[source]
        source: Box<SimError>,
    },

    #[error("usage: {0}")]
    Usage(String),

    #[error("config: {0}")]
    Config(String),
}

impl SimError {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        SimError::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn at_power(self, power_w: f64) -> Self {
        match self {
            e @ SimError::AtPower { .. } => e,
            e => SimError::AtPower {
                power_w,
                source: Box::new(e),
            },
        }
    }

    /// True for solver / fixed-point failures (as opposed to bad input).
    pub fn is_numeric(&self) -> bool {
        match self {
            SimError::NoConvergence { .. } => true,
            SimError::AtPower { source, .. } | SimError::AtPulse { source, .. } => {
                source.is_numeric()
            }
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, SimError>;
