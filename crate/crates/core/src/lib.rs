//! Circuit-level simulation of gated Geiger-mode avalanche photodiodes under
//! bright-light blinding, with a BB84 Monte Carlo harness and a
//! photocurrent monitor.

pub mod attack;
pub mod calibrate;
pub mod circuit;
pub mod config;
pub mod detector;
pub mod error;
pub mod qkd;
pub mod sentinel;

pub use config::{DetectorConfig, Discrimination, Preset};
pub use error::{Result, SimError};
