//! Attacker-side computations: where a detector goes blind, how bright a
//! faked-state trigger has to be, and whether heating alone can blind it.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::config::DetectorConfig;
use crate::detector::{classical_click, detector_blind, log_grid, steady_state, SteadyState};
use crate::error::{Result, SimError};

/// Default scan range; brackets every power of interest by two decades.
pub const DEFAULT_SCAN_MIN: f64 = 1e-12;
pub const DEFAULT_SCAN_MAX: f64 = 0.1;
pub const SCAN_POINTS_PER_DECADE: usize = 25;
/// Relative precision of refined window edges.
pub const EDGE_PRECISION: f64 = 0.01;

/// CW power range over which the detector is blind, edges inclusive. An
/// isolated blind sample gives `p_min == p_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlindingWindow {
    pub p_min: f64,
    pub p_max: f64,
}

impl BlindingWindow {
    pub fn midpoint(&self) -> f64 {
        (self.p_min * self.p_max).sqrt()
    }

    /// Decades spanned by the window.
    pub fn log_width(&self) -> f64 {
        (self.p_max / self.p_min).log10()
    }

    pub fn contains(&self, p: f64) -> bool {
        self.p_min <= p && p <= self.p_max
    }
}

/// Bisects in log power between a blind and a non-blind sample; returns the
/// blind end once the bracket is within `EDGE_PRECISION`.
fn refine_edge(cfg: &DetectorConfig, mut blind: f64, mut open: f64) -> Result<f64> {
    while (blind / open).ln().abs() > EDGE_PRECISION.ln_1p() {
        let mid = (blind * open).sqrt();
        if detector_blind(cfg, mid)? {
            blind = mid;
        } else {
            open = mid;
        }
    }
    Ok(blind)
}

/// Coarse log sweep at 25 points per decade, then bisection on both edges of
/// the first blind run. `None` if no sampled power is blind.
pub fn find_blinding_window(
    cfg: &DetectorConfig,
    p_lo: f64,
    p_hi: f64,
) -> Result<Option<BlindingWindow>> {
    cfg.validate()?;
    let grid = log_grid(p_lo, p_hi, SCAN_POINTS_PER_DECADE)?;
    let blind = grid
        .iter()
        .map(|&p| detector_blind(cfg, p))
        .collect::<Result<Vec<bool>>>()?;
    let Some(first) = blind.iter().position(|&b| b) else {
        return Ok(None);
    };
    let last = first + blind[first..].iter().take_while(|&&b| b).count() - 1;

    let p_min = if first == 0 {
        grid[0]
    } else {
        refine_edge(cfg, grid[first], grid[first - 1])?
    };
    let p_max = if last + 1 == grid.len() {
        grid[last]
    } else {
        refine_edge(cfg, grid[last], grid[last + 1])?
    };
    Ok(Some(BlindingWindow { p_min, p_max }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    CwBlindFakedState,
    Thermal,
}

/// Eve's optical waveform at the detector: a CW blinding level plus a
/// rectangular, gate-aligned trigger pulse of power `p_trigger`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackScenario {
    pub p_blind: f64,
    pub p_trigger: f64,
    pub trigger_width: f64,
    pub mode: AttackMode,
}

impl AttackScenario {
    pub fn faked_state(cfg: &DetectorConfig, p_blind: f64, p_trigger: f64) -> Self {
        AttackScenario {
            p_blind,
            p_trigger,
            trigger_width: cfg.gate_width,
            mode: AttackMode::CwBlindFakedState,
        }
    }

    pub fn validate(&self, cfg: &DetectorConfig) -> Result<()> {
        if !(self.p_blind >= 0.0 && self.p_blind.is_finite()) {
            return Err(SimError::invalid("p_blind", "must be >= 0"));
        }
        if !(self.p_trigger >= 0.0 && self.p_trigger.is_finite()) {
            return Err(SimError::invalid("p_trigger", "must be >= 0"));
        }
        if !(self.trigger_width > 0.0 && self.trigger_width <= cfg.gate_width) {
            return Err(SimError::invalid(
                "trigger_width",
                format!("must lie in (0, gate_width], got {:e}", self.trigger_width),
            ));
        }
        Ok(())
    }
}

/// Why no trigger pulse could be designed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoTrigger {
    /// The CW level does not blind the detector.
    NotBlind,
    /// No pulse power up to the search ceiling produces a classical click.
    NoClassicalClick,
    /// Full-power and half-power responses could not be separated.
    NoGap,
}

impl fmt::Display for NoTrigger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoTrigger::NotBlind => "not_blind",
            NoTrigger::NoClassicalClick => "no_classical_click",
            NoTrigger::NoGap => "no_gap",
        })
    }
}

const TRIGGER_FLOOR: f64 = 1e-15;
const TRIGGER_CEILING: f64 = 10.0;

/// Classical click of a blinded detector at CW `p_blind` with an added
/// in-gate pulse of power `p_t`.
pub fn trigger_clicks(cfg: &DetectorConfig, state: &SteadyState, p_t: f64) -> bool {
    classical_click(cfg, &state.op, state.point.p_cw + p_t, &state.thermal).0
}

/// Pulse power that clicks the blinded detector at full power but not at the
/// half power a basis mismatch delivers. Searches the octave above the
/// classical-click threshold, preferring its geometric middle.
pub fn design_trigger_pulse(cfg: &DetectorConfig, p_blind: f64) -> Result<std::result::Result<f64, NoTrigger>> {
    cfg.validate()?;
    if !detector_blind(cfg, p_blind)? {
        return Ok(Err(NoTrigger::NotBlind));
    }
    let state = steady_state(cfg, p_blind)?;
    let clicks = |p: f64| trigger_clicks(cfg, &state, p);

    let mut hi = TRIGGER_FLOOR;
    while !clicks(hi) {
        hi *= 2.0;
        if hi > TRIGGER_CEILING {
            return Ok(Err(NoTrigger::NoClassicalClick));
        }
    }
    let mut lo = hi / 2.0;
    if clicks(lo) {
        lo = 0.0;
    }
    while hi - lo > 1e-9 * hi {
        let mid = 0.5 * (lo + hi);
        if clicks(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let threshold = hi;
    for k in [4, 3, 5, 2, 6, 1, 7] {
        let p_t = threshold * 2f64.powf(k as f64 / 8.0);
        if clicks(p_t) && !clicks(p_t / 2.0) {
            return Ok(Ok(p_t));
        }
    }
    Ok(Err(NoTrigger::NoGap))
}

/// Outcome of shining CW light long enough for the junction to heat up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThermalReport {
    pub p_cw: f64,
    pub blinded_thermally: bool,
    pub p_heat: f64,
    pub t_junction: f64,
    pub v_b_effective: f64,
    pub count_prob: f64,
    pub still_counting: bool,
}

impl ThermalReport {
    pub fn to_text(&self) -> String {
        format!(
            "p_cw_w: {:.6e}\nblinded_thermally: {}\np_heat_w: {:.6e}\nt_junction_k: {:.6}\nv_b_effective_v: {:.6}\ncount_prob: {:.9}\nstill_counting: {}\n",
            self.p_cw,
            self.blinded_thermally,
            self.p_heat,
            self.t_junction,
            self.v_b_effective,
            self.count_prob,
            self.still_counting
        )
    }
}

pub fn assess_thermal_attack(cfg: &DetectorConfig, p_cw: f64) -> Result<ThermalReport> {
    cfg.validate()?;
    if !(p_cw >= 0.0) {
        return Err(SimError::invalid("p_cw", format!("must be >= 0, got {p_cw}")));
    }
    let s = steady_state(cfg, p_cw)?;
    Ok(ThermalReport {
        p_cw,
        blinded_thermally: detector_blind(cfg, p_cw)?,
        p_heat: s.thermal.p_heat,
        t_junction: s.thermal.t_junction,
        v_b_effective: s.thermal.v_b_effective,
        count_prob: s.point.count_prob,
        still_counting: s.point.count_prob >= 0.99,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Preset;

    #[test]
    fn zero_rbias_has_no_window_or_trigger() {
        let cfg = Preset::ZeroRbias.config();
        assert_eq!(find_blinding_window(&cfg, 1e-9, 1e-3).unwrap(), None);
        assert_eq!(design_trigger_pulse(&cfg, 1e-6).unwrap(), Err(NoTrigger::NotBlind));
    }

    #[test]
    fn dark_thermal_report() {
        let cfg = Preset::Paper680k.config();
        let r = assess_thermal_attack(&cfg, 0.0).unwrap();
        assert!(!r.blinded_thermally);
        assert!(!r.still_counting);
        assert!((r.count_prob - cfg.dark_prob).abs() < 1e-12);
        assert!(r.to_text().contains("still_counting: false\n"));
        assert!(assess_thermal_attack(&cfg, -1.0).is_err());
    }

    #[test]
    fn scenario_validation() {
        let cfg = DetectorConfig::default();
        let mut s = AttackScenario::faked_state(&cfg, 1e-6, 1e-4);
        assert!(s.validate(&cfg).is_ok());
        s.trigger_width = 2.0 * cfg.gate_width;
        assert!(s.validate(&cfg).is_err());
        s = AttackScenario::faked_state(&cfg, -1.0, 1e-4);
        assert!(s.validate(&cfg).is_err());
    }

    #[test]
    fn window_geometry() {
        let w = BlindingWindow { p_min: 1e-8, p_max: 1e-5 };
        assert!((w.log_width() - 3.0).abs() < 1e-12);
        assert!((w.midpoint() - 10f64.powf(-6.5)).abs() < 1e-15);
        assert!(w.contains(1e-6) && !w.contains(1e-4));
    }
}
