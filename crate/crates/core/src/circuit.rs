//! Electrical and thermal model of one gated APD channel.
//!
//! The bias node (through `r_bias`, filtered by `c_filter`) is treated as DC
//! on the gate timescale; the sense node responds instantly. Between gates the
//! diode carries linear-mode photocurrent, the time-averaged charge of Geiger
//! avalanches, and leakage. All of it flows through `r_bias + r_sense` and
//! pulls the APD bias down.

use crate::config::DetectorConfig;
use crate::error::{Result, SimError};

pub const PLANCK: f64 = 6.626_070_15e-34;
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Relative residual bound on the quiescent fixed point.
pub const QUIESCENT_TOLERANCE: f64 = 1e-9;
/// Relative residual bound on the junction temperature fixed point.
pub const THERMAL_TOLERANCE: f64 = 1e-6;

const MAX_BISECTION: usize = 200;
const MAX_THERMAL_ITERATIONS: usize = 500;

/// Raw law `1 / (1 - (v/v_b)^n)`, saturated smoothly so that it runs from 1
/// at zero bias to exactly `cap` at breakdown. A hard clamp would flatten
/// the gain over the last volts below breakdown and kill the gate-driven
/// modulation there.
fn gain_law(v: f64, v_b: f64, exponent: f64, cap: f64) -> f64 {
    if v <= 0.0 {
        1.0
    } else if v >= v_b {
        cap
    } else {
        // 1/M of the raw law; M_sat = M cap / (M + cap - 1).
        let inv = 1.0 - (v / v_b).powf(exponent);
        cap / (1.0 + inv * (cap - 1.0))
    }
}

/// Linear-mode multiplication `M = 1 / (1 - (v/v_b)^n)`, saturating at
/// `gain_cap` (reached exactly at breakdown).
///
/// At or above breakdown the linear law has no meaning and the cap is
/// returned; callers branch on [`OperatingPoint::geiger_armed`].
pub fn multiplication_gain(v: f64, v_b: f64, cfg: &DetectorConfig) -> Result<f64> {
    if !(v >= 0.0) {
        return Err(SimError::invalid("v", format!("bias must be >= 0, got {v}")));
    }
    if !(v_b > 0.0) {
        return Err(SimError::invalid("v_b", format!("breakdown must be > 0, got {v_b}")));
    }
    Ok(gain_law(v, v_b, cfg.gain_exponent, cfg.gain_cap))
}

/// Primary (unity-gain) photocurrent.
pub fn unity_photocurrent(p_opt: f64, cfg: &DetectorConfig) -> Result<f64> {
    if !(p_opt >= 0.0) {
        return Err(SimError::invalid(
            "p_opt",
            format!("optical power must be >= 0, got {p_opt}"),
        ));
    }
    Ok(cfg.unity_responsivity * p_opt)
}

/// Charge released by one Geiger avalanche: the diode capacitance discharged
/// from the gate peak down to breakdown.
pub fn avalanche_charge(cfg: &DetectorConfig, v_gate_peak: f64, v_b_eff: f64) -> f64 {
    cfg.c_diode * (v_gate_peak - v_b_eff).max(0.0)
}

/// Sense-node height of an avalanche pulse at the given excess bias.
pub fn avalanche_pulse_amplitude(cfg: &DetectorConfig, excess: f64) -> f64 {
    cfg.r_sense * excess.max(0.0) / (cfg.r_diode + cfg.r_sense)
}

/// Energy of one photon at the configured wavelength.
pub fn photon_energy(cfg: &DetectorConfig) -> f64 {
    PLANCK * SPEED_OF_LIGHT / cfg.wavelength
}

pub fn breakdown_at_temperature(cfg: &DetectorConfig, t: f64) -> f64 {
    cfg.v_breakdown_ref + cfg.beta_vb * (t - cfg.t_ref)
}

/// Solves `I = i0 * M(a - b*I)` for the current through a diode whose
/// junction sees `a` minus the drop `b*I` on series resistance.
///
/// The junction cannot be driven below zero, so the current saturates at
/// `a / b` once the primary photocurrent alone would exceed it.
fn space_charge_current(cfg: &DetectorConfig, v_b: f64, i0: f64, a: f64, b: f64) -> f64 {
    if i0 <= 0.0 || (a <= 0.0 && b > 0.0) {
        return 0.0;
    }
    let n = cfg.gain_exponent;
    let cap = cfg.gain_cap;
    if b <= 0.0 {
        return i0 * gain_law(a, v_b, n, cap);
    }
    let i_sat = a / b;
    if i0 >= i_sat {
        return i_sat;
    }
    let h = |i: f64| i0 * gain_law(a - b * i, v_b, n, cap) - i;
    let mut lo = i0;
    let mut hi = (i0 * gain_law(a, v_b, n, cap)).min(i_sat);
    if h(hi) >= 0.0 {
        return hi;
    }
    for _ in 0..MAX_BISECTION {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if h(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Junction temperature, the breakdown voltage it implies, and the power
/// dissipated in the diode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThermalState {
    pub t_junction: f64,
    pub v_b_effective: f64,
    pub p_heat: f64,
}

impl ThermalState {
    pub fn ambient(cfg: &DetectorConfig) -> Self {
        Self::at(cfg, cfg.t_ambient, 0.0)
    }

    pub fn at(cfg: &DetectorConfig, t_junction: f64, p_heat: f64) -> Self {
        ThermalState {
            t_junction,
            v_b_effective: breakdown_at_temperature(cfg, t_junction),
            p_heat,
        }
    }
}

/// Self-consistent state of the bias network under CW illumination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    /// Voltage across the APD between gates.
    pub v_apd: f64,
    /// Multiplied linear-mode photocurrent.
    pub i_photo: f64,
    /// Time-averaged Geiger current, `click_prob * Q * gate_rate`.
    pub i_avalanche_avg: f64,
    pub i_dark: f64,
    pub i_total: f64,
    /// Linear gain at the junction voltage `v_apd - i_photo * r_diode`.
    pub gain: f64,
    /// Gate peak above the effective breakdown voltage.
    pub geiger_armed: bool,
    /// `v_apd + gate_amplitude - v_b_effective`; negative when disarmed.
    pub excess_bias: f64,
    pub residual: f64,
}

impl OperatingPoint {
    pub fn v_gate_peak(&self, cfg: &DetectorConfig) -> f64 {
        self.v_apd + cfg.gate_amplitude
    }
}

struct NodeCurrents {
    photo: f64,
    avalanche: f64,
    dark: f64,
}

impl NodeCurrents {
    fn total(&self) -> f64 {
        self.photo + self.avalanche + self.dark
    }
}

fn node_currents(cfg: &DetectorConfig, i0: f64, click_prob: f64, v_b: f64, v: f64) -> NodeCurrents {
    let photo = space_charge_current(cfg, v_b, i0, v, cfg.r_diode);
    let q = avalanche_charge(cfg, v + cfg.gate_amplitude, v_b);
    NodeCurrents {
        photo,
        avalanche: click_prob * q * cfg.gate_rate,
        dark: cfg.dark_current,
    }
}

/// `v - (v_dc - I_total(v) * (r_bias + r_sense))`: strictly increasing in `v`,
/// zero at the quiescent point.
pub fn quiescent_mismatch(
    cfg: &DetectorConfig,
    p_cw: f64,
    click_prob: f64,
    thermal: &ThermalState,
    v: f64,
) -> f64 {
    let i0 = cfg.unity_responsivity * p_cw;
    let currents = node_currents(cfg, i0, click_prob, thermal.v_b_effective, v);
    v - cfg.v_dc + currents.total() * (cfg.r_bias + cfg.r_sense)
}

/// Finds the bias-node voltage that balances the diode current against the
/// drop on `r_bias + r_sense`, by bisection on [`quiescent_mismatch`] over
/// `[0, v_dc]`.
pub fn solve_quiescent_point(
    cfg: &DetectorConfig,
    p_cw: f64,
    click_prob: f64,
    thermal: &ThermalState,
) -> Result<OperatingPoint> {
    if !(p_cw >= 0.0) {
        return Err(SimError::invalid("p_cw", format!("must be >= 0, got {p_cw}")));
    }
    if !(0.0..=1.0).contains(&click_prob) {
        return Err(SimError::invalid(
            "click_prob",
            format!("must lie in [0, 1], got {click_prob}"),
        ));
    }
    let f = |v: f64| quiescent_mismatch(cfg, p_cw, click_prob, thermal, v);

    let v = if f(0.0) >= 0.0 {
        0.0
    } else if f(cfg.v_dc) <= 0.0 {
        cfg.v_dc
    } else {
        let (mut lo, mut hi) = (0.0, cfg.v_dc);
        for _ in 0..MAX_BISECTION {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if f(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        if f(lo).abs() <= f(hi).abs() {
            lo
        } else {
            hi
        }
    };

    let i0 = cfg.unity_responsivity * p_cw;
    let v_b = thermal.v_b_effective;
    let currents = node_currents(cfg, i0, click_prob, v_b, v);
    let rhs = (cfg.v_dc - currents.total() * (cfg.r_bias + cfg.r_sense)).clamp(0.0, cfg.v_dc);
    let residual = (v - rhs).abs();
    if residual > QUIESCENT_TOLERANCE * cfg.v_dc {
        return Err(SimError::NoConvergence {
            what: "quiescent operating point",
            iterations: MAX_BISECTION,
            residual,
        });
    }
    let excess = v + cfg.gate_amplitude - v_b;
    Ok(OperatingPoint {
        v_apd: v,
        i_photo: currents.photo,
        i_avalanche_avg: currents.avalanche,
        i_dark: currents.dark,
        i_total: currents.total(),
        gain: gain_law(
            v - currents.photo * cfg.r_diode,
            v_b,
            cfg.gain_exponent,
            cfg.gain_cap,
        ),
        geiger_armed: excess > 0.0,
        excess_bias: excess,
        residual,
    })
}

/// Current through the diode at the gate peak, with the bias node frozen at
/// its quiescent value and the sense node rising with the extra current.
pub fn gate_current(
    cfg: &DetectorConfig,
    op_off: &OperatingPoint,
    p_during_gate: f64,
    thermal: &ThermalState,
) -> f64 {
    let i0 = cfg.unity_responsivity * p_during_gate.max(0.0);
    let a = op_off.v_gate_peak(cfg) + op_off.i_photo * cfg.r_sense;
    let b = cfg.r_diode + cfg.r_sense;
    space_charge_current(cfg, thermal.v_b_effective, i0, a, b)
}

/// Gate-synchronous photocurrent step seen across the sense resistor,
/// `(I_on - I_off) * r_sense`. Excludes the capacitive transient.
pub fn sense_pulse_amplitude(
    cfg: &DetectorConfig,
    op_off: &OperatingPoint,
    p_during_gate: f64,
    thermal: &ThermalState,
) -> f64 {
    let i_on = gate_current(cfg, op_off, p_during_gate, thermal);
    ((i_on - op_off.i_photo) * cfg.r_sense).max(0.0)
}

/// Joint fixed point of the operating point and the junction temperature.
/// Also returns the operating point at that temperature.
pub fn thermal_fixed_point(
    cfg: &DetectorConfig,
    p_cw: f64,
    click_prob: f64,
) -> Result<(ThermalState, OperatingPoint)> {
    let t_amb = cfg.t_ambient;
    let mut t = t_amb;
    let mut relax: f64 = 1.0;
    let mut last_resid = f64::INFINITY;
    for _ in 0..MAX_THERMAL_ITERATIONS {
        let probe = ThermalState::at(cfg, t, 0.0);
        let op = solve_quiescent_point(cfg, p_cw, click_prob, &probe)?;
        let p_heat = (op.i_total * op.v_apd).max(0.0);
        let target = t_amb + cfg.theta_thermal * p_heat;
        let resid = (target - t).abs();
        if resid <= THERMAL_TOLERANCE * (target - t_amb).max(1e-9) {
            return Ok((ThermalState::at(cfg, t, p_heat), op));
        }
        if resid >= last_resid {
            relax = (relax * 0.5).max(1.0 / 64.0);
        }
        last_resid = resid;
        t += relax * (target - t);
    }
    Err(SimError::NoConvergence {
        what: "junction temperature",
        iterations: MAX_THERMAL_ITERATIONS,
        residual: last_resid,
    })
}

/// Junction temperature reached under CW light at a given click probability.
pub fn thermal_equilibrium(cfg: &DetectorConfig, p_cw: f64, click_prob: f64) -> Result<ThermalState> {
    thermal_fixed_point(cfg, p_cw, click_prob).map(|(t, _)| t)
}
