//! Bias-current monitor: flags anomalously high APD current.
//!
//! Any bright-light attack has to push a large continuous photocurrent
//! through the diode, while legitimate operation between gates draws only
//! leakage.

use serde::{Deserialize, Serialize};

use crate::circuit::avalanche_charge;
use crate::config::DetectorConfig;
use crate::error::{Result, SimError};

pub const DEFAULT_SAFETY_FACTOR: f64 = 10.0;
pub const DEFAULT_WINDOW: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MonitorMode {
    /// Sample the diode current between gates.
    InterGate,
    /// Sample the full bias-current average, avalanche charge included.
    FullAverage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonitorConfig {
    /// Time between samples; one gate period by default.
    pub sample_interval: f64,
    /// Samples in the sliding mean.
    pub window: usize,
    pub threshold: f64,
    pub mode: MonitorMode,
}

impl MonitorConfig {
    /// Inter-gate monitor with the default window and safety factor.
    pub fn for_detector(cfg: &DetectorConfig) -> Result<Self> {
        Self::with_mode(cfg, MonitorMode::InterGate, DEFAULT_SAFETY_FACTOR)
    }

    pub fn with_mode(cfg: &DetectorConfig, mode: MonitorMode, safety_factor: f64) -> Result<Self> {
        Ok(MonitorConfig {
            sample_interval: 1.0 / cfg.gate_rate,
            window: DEFAULT_WINDOW,
            threshold: derive_threshold(cfg, mode, safety_factor)?,
            mode,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 1 {
            return Err(SimError::invalid("window", "must be >= 1"));
        }
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            return Err(SimError::invalid("threshold", "must be > 0"));
        }
        if !(self.sample_interval > 0.0) {
            return Err(SimError::invalid("sample_interval", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Alarm {
    pub sample_index: usize,
    pub window_mean: f64,
}

/// Alarm threshold: `safety_factor` times the largest current legitimate
/// operation produces in the monitored quantity.
pub fn derive_threshold(cfg: &DetectorConfig, mode: MonitorMode, safety_factor: f64) -> Result<f64> {
    if !(safety_factor > 1.0 && safety_factor.is_finite()) {
        return Err(SimError::invalid(
            "safety_factor",
            format!("must be > 1, got {safety_factor}"),
        ));
    }
    let legit = match mode {
        MonitorMode::InterGate => cfg.dark_current,
        MonitorMode::FullAverage => {
            let q = avalanche_charge(cfg, cfg.v_dc + cfg.gate_amplitude, cfg.v_breakdown_ref);
            q * cfg.gate_rate + cfg.dark_current
        }
    };
    let threshold = safety_factor * legit;
    if threshold > 0.0 {
        Ok(threshold)
    } else {
        Err(SimError::invalid(
            "dark_current",
            "legitimate current is zero; threshold would be degenerate",
        ))
    }
}

/// Sliding-window mean over `(index, current)` samples. One alarm per
/// contiguous excursion above threshold, reported at its first sample; means
/// are only evaluated once the window has filled.
pub fn scan_current_trace(trace: &[(usize, f64)], mcfg: &MonitorConfig) -> Result<Vec<Alarm>> {
    mcfg.validate()?;
    if trace.is_empty() {
        return Err(SimError::invalid("trace", "must be nonempty"));
    }
    let w = mcfg.window;
    let mut alarms = Vec::new();
    let mut sum = 0.0;
    let mut in_excursion = false;
    for (k, &(index, current)) in trace.iter().enumerate() {
        sum += current;
        if k >= w {
            sum -= trace[k - w].1;
        }
        if k + 1 < w {
            continue;
        }
        // Re-summing periodically keeps the running sum from drifting.
        if k % 4096 == 0 {
            sum = trace[k + 1 - w..=k].iter().map(|s| s.1).sum();
        }
        let mean = sum / w as f64;
        if mean > mcfg.threshold {
            if !in_excursion {
                alarms.push(Alarm {
                    sample_index: index,
                    window_mean: mean,
                });
                in_excursion = true;
            }
        } else {
            in_excursion = false;
        }
    }
    Ok(alarms)
}

pub const ALARM_CSV_HEADER: &str = "sample_index,window_mean_a";

pub fn alarms_to_csv(alarms: &[Alarm]) -> String {
    let mut out = String::from(ALARM_CSV_HEADER);
    out.push('\n');
    for a in alarms {
        out.push_str(&format!("{},{:.6e}\n", a.sample_index, a.window_mean));
    }
    out
}
