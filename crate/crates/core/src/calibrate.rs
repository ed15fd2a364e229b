//! Fits the unmeasured device parameters to published blinding thresholds.
//!
//! The objective is a sum of squared log-ratios between simulated and target
//! powers, minimized by Nelder-Mead in log-parameter space from a fixed set
//! of starting points, so a given target list always yields the same fit.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::config::{DetectorConfig, Discrimination, CLAVIS2_V_CAP};
use crate::detector::{count_probability, log_grid, steady_state};
use crate::error::{Result, SimError};

/// Penalty for a target whose window (or heating point) does not exist.
const MISSING_PENALTY: f64 = 100.0;
/// Penalty for a window where none should be.
const NEVER_BLIND_PENALTY: f64 = 50.0;
/// Scan used inside the objective: coarse grid, then bisection on edges.
const FIT_SCAN_MIN: f64 = 1e-12;
const FIT_SCAN_MAX: f64 = 0.1;
const FIT_POINTS_PER_DECADE: usize = 6;
const FIT_EDGE_PRECISION: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Observable {
    /// Lower edge of the blind window.
    BlindOnset,
    /// Upper edge, where gain-modulated clicks resume.
    Recovery,
    /// The window must contain the power.
    BlindAt,
    /// No blind window anywhere in the scan range.
    NeverBlind,
    /// Dissipated electrical power at the given CW input.
    Heating,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTarget {
    pub r_bias: f64,
    pub observable: Observable,
    /// Watts; the heat target compares `value` against dissipation at `power`.
    pub power: Option<f64>,
    pub discrimination: Discrimination,
    /// Capacitive transient of this front end; `None` keeps the base value.
    pub v_cap_transient: Option<f64>,
    /// Expected dissipation for `Heating` targets.
    pub value: Option<f64>,
}

impl CalibrationTarget {
    pub fn new(r_bias: f64, observable: Observable, power: Option<f64>, d: Discrimination) -> Self {
        CalibrationTarget {
            r_bias,
            observable,
            power,
            discrimination: d,
            v_cap_transient: None,
            value: None,
        }
    }

    pub fn with_front_end(mut self, v_cap: f64) -> Self {
        self.v_cap_transient = Some(v_cap);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r_bias >= 0.0 && self.r_bias.is_finite()) {
            return Err(SimError::invalid("r_bias", "must be >= 0"));
        }
        match (self.observable, self.power) {
            (Observable::NeverBlind, None) => {}
            (Observable::NeverBlind, Some(_)) => {
                return Err(SimError::invalid("power", "never_blind takes no power"))
            }
            (_, Some(p)) if p > 0.0 && p.is_finite() => {}
            _ => return Err(SimError::invalid("power", "must be > 0")),
        }
        if self.observable == Observable::Heating && !self.value.is_some_and(|v| v > 0.0) {
            return Err(SimError::invalid("value", "heating target needs a dissipation > 0"));
        }
        Ok(())
    }

    fn config(&self, fitted: &DetectorConfig) -> DetectorConfig {
        let v_cap = self.v_cap_transient.unwrap_or(fitted.v_cap_transient);
        fitted
            .clone()
            .with_r_bias(self.r_bias)
            .with_capacitive_signal(v_cap, self.discrimination)
    }

    fn same_detector(&self, other: &CalibrationTarget) -> bool {
        self.r_bias == other.r_bias
            && self.discrimination == other.discrimination
            && self.v_cap_transient == other.v_cap_transient
    }
}

/// The published observations: three blind onsets, recovery near 20 uW for
/// each of those resistors, blinding at 260 uW for the 1 kOhm front end at
/// 2L0, the two configurations that cannot be blinded, and the heating
/// reached at 17.8 mW on the 1 kOhm front end.
pub fn reference_targets() -> Vec<CalibrationTarget> {
    use Discrimination::{TwoL0, L0};
    use Observable::*;
    let mut v = Vec::new();
    for (r, onset) in [(680e3, 22e-9), (330e3, 350e-9), (100e3, 2.4e-6)] {
        v.push(CalibrationTarget::new(r, BlindOnset, Some(onset), TwoL0));
        v.push(CalibrationTarget::new(r, Recovery, Some(20e-6), TwoL0));
    }
    v.push(CalibrationTarget::new(1e3, BlindAt, Some(260e-6), TwoL0).with_front_end(CLAVIS2_V_CAP));
    v.push(CalibrationTarget::new(1e3, NeverBlind, None, L0).with_front_end(CLAVIS2_V_CAP));
    v.push(CalibrationTarget::new(0.0, NeverBlind, None, L0));
    v.push(CalibrationTarget {
        value: Some(0.5),
        ..CalibrationTarget::new(1e3, Heating, Some(17.8e-3), L0).with_front_end(CLAVIS2_V_CAP)
    });
    v
}

/// Parameters the reference fit is allowed to move.
pub const REFERENCE_FREE_PARAMS: [FreeParam; 6] = [
    FreeParam::GainExponent,
    FreeParam::UnityResponsivity,
    FreeParam::CDiode,
    FreeParam::RDiode,
    FreeParam::GainCap,
    FreeParam::VCapTransient,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreeParam {
    GainExponent,
    UnityResponsivity,
    CDiode,
    VBreakdownRef,
    ThetaThermal,
    RDiode,
    GainCap,
    VCapTransient,
}

impl FreeParam {
    pub fn name(self) -> &'static str {
        match self {
            FreeParam::GainExponent => "gain_exponent",
            FreeParam::UnityResponsivity => "unity_responsivity",
            FreeParam::CDiode => "c_diode",
            FreeParam::VBreakdownRef => "v_breakdown_ref",
            FreeParam::ThetaThermal => "theta_thermal",
            FreeParam::RDiode => "r_diode",
            FreeParam::GainCap => "gain_cap",
            FreeParam::VCapTransient => "v_cap_transient",
        }
    }

    pub fn get(self, cfg: &DetectorConfig) -> f64 {
        match self {
            FreeParam::GainExponent => cfg.gain_exponent,
            FreeParam::UnityResponsivity => cfg.unity_responsivity,
            FreeParam::CDiode => cfg.c_diode,
            FreeParam::VBreakdownRef => cfg.v_breakdown_ref,
            FreeParam::ThetaThermal => cfg.theta_thermal,
            FreeParam::RDiode => cfg.r_diode,
            FreeParam::GainCap => cfg.gain_cap,
            FreeParam::VCapTransient => cfg.v_cap_transient,
        }
    }

    /// Sets the parameter. Breakdown moves `v_dc` along to keep the excess
    /// bias; the capacitive signal moves the discrimination level with it.
    pub fn set(self, cfg: DetectorConfig, value: f64) -> DetectorConfig {
        let mut c = cfg;
        match self {
            FreeParam::GainExponent => c.gain_exponent = value,
            FreeParam::UnityResponsivity => c.unity_responsivity = value,
            FreeParam::CDiode => c.c_diode = value,
            FreeParam::VBreakdownRef => return c.with_breakdown_keeping_excess(value),
            FreeParam::ThetaThermal => c.theta_thermal = value,
            FreeParam::RDiode => c.r_diode = value,
            FreeParam::GainCap => c.gain_cap = value,
            FreeParam::VCapTransient => {
                let multiple = c.discrimination_level / c.v_cap_transient;
                c.discrimination_level = value * multiple;
                c.v_cap_transient = value;
            }
        }
        c
    }

    pub fn from_name(s: &str) -> Option<FreeParam> {
        use FreeParam::*;
        [
            GainExponent,
            UnityResponsivity,
            CDiode,
            VBreakdownRef,
            ThetaThermal,
            RDiode,
            GainCap,
            VCapTransient,
        ]
        .into_iter()
        .find(|p| p.name() == s)
    }
}

impl fmt::Display for FreeParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Blind window as the fitting objective sees it: first blind run of a
/// coarse grid with both edges bisected to `FIT_EDGE_PRECISION`.
fn fit_window(cfg: &DetectorConfig) -> Result<Option<(f64, f64)>> {
    let blinded = |p: f64| count_probability(cfg, p).map(|s| s.blinded);
    let grid = log_grid(FIT_SCAN_MIN, FIT_SCAN_MAX, FIT_POINTS_PER_DECADE)?;
    let flags = grid.iter().map(|&p| blinded(p)).collect::<Result<Vec<_>>>()?;
    let Some(first) = flags.iter().position(|&b| b) else {
        return Ok(None);
    };
    let last = first + flags[first..].iter().take_while(|&&b| b).count() - 1;
    let refine = |mut blind: f64, mut open: f64| -> Result<f64> {
        while (blind / open).ln().abs() > FIT_EDGE_PRECISION {
            let mid = (blind * open).sqrt();
            if blinded(mid)? {
                blind = mid;
            } else {
                open = mid;
            }
        }
        Ok(blind)
    };
    let lo = if first == 0 { grid[0] } else { refine(grid[first], grid[first - 1])? };
    let hi = if last + 1 == grid.len() { grid[last] } else { refine(grid[last], grid[last + 1])? };
    Ok(Some((lo, hi)))
}

/// What the model produced for one target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetResidual {
    pub target: CalibrationTarget,
    /// Simulated power (or dissipation) compared against the target.
    pub achieved: Option<f64>,
    /// achieved / target; 1 for satisfied containment targets.
    pub ratio: Option<f64>,
    pub satisfied_never_blind: Option<bool>,
    pub cost: f64,
}

/// Per-target residuals for a fitted configuration.
pub fn evaluate_targets(
    fitted: &DetectorConfig,
    targets: &[CalibrationTarget],
) -> Result<Vec<TargetResidual>> {
    let mut windows: Vec<(CalibrationTarget, Option<(f64, f64)>)> = Vec::new();
    let sq = |r: f64| r.ln().powi(2);
    let mut out = Vec::with_capacity(targets.len());
    for t in targets {
        let cfg = t.config(fitted);
        if t.observable == Observable::Heating {
            let p = t.power.unwrap_or_default();
            let s = steady_state(&cfg, p)?;
            let want = t.value.unwrap_or(1.0);
            let ratio = s.thermal.p_heat / want;
            out.push(TargetResidual {
                target: *t,
                achieved: Some(s.thermal.p_heat),
                ratio: Some(ratio),
                satisfied_never_blind: None,
                cost: if ratio > 0.0 { sq(ratio) } else { MISSING_PENALTY },
            });
            continue;
        }
        let window = match windows.iter().find(|(w, _)| w.same_detector(t)) {
            Some((_, w)) => *w,
            None => {
                let w = fit_window(&cfg)?;
                windows.push((*t, w));
                w
            }
        };
        let r = match (t.observable, window) {
            (Observable::NeverBlind, w) => TargetResidual {
                target: *t,
                achieved: None,
                ratio: None,
                satisfied_never_blind: Some(w.is_none()),
                cost: if w.is_none() { 0.0 } else { NEVER_BLIND_PENALTY },
            },
            (_, None) => TargetResidual {
                target: *t,
                achieved: None,
                ratio: None,
                satisfied_never_blind: None,
                cost: MISSING_PENALTY,
            },
            (obs, Some((lo, hi))) => {
                let p = t.power.unwrap_or(1.0);
                let (achieved, ratio) = match obs {
                    Observable::BlindOnset => (lo, lo / p),
                    Observable::Recovery => (hi, hi / p),
                    _ if lo <= p && p <= hi => (p, 1.0),
                    _ if p < lo => (lo, lo / p),
                    _ => (hi, hi / p),
                };
                // Blind at the bottom of the scan means blind in the dark.
                let dark_blind = if lo <= FIT_SCAN_MIN { NEVER_BLIND_PENALTY } else { 0.0 };
                TargetResidual {
                    target: *t,
                    achieved: Some(achieved),
                    ratio: Some(ratio),
                    satisfied_never_blind: None,
                    cost: sq(ratio) + dark_blind,
                }
            }
        };
        out.push(r);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSettings {
    pub max_evaluations: usize,
    /// Stop once the simplex values agree to this absolute spread.
    pub f_tolerance: f64,
    /// ...and its vertices to this spread in log-parameter space.
    pub x_tolerance: f64,
    /// Initial simplex step in log-parameter space.
    pub initial_step: f64,
    /// Extra starts at `base * exp(+-spread)` per parameter, on top of `base`.
    pub multi_start_spread: Option<f64>,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            max_evaluations: 400,
            // Window edges are resolved to ~1e-3 in log power, so the
            // objective is flat below about this spread.
            f_tolerance: 1e-4,
            x_tolerance: 1e-3,
            initial_step: 0.1,
            multi_start_spread: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub fitted: DetectorConfig,
    pub params: Vec<(FreeParam, f64)>,
    pub residuals: Vec<TargetResidual>,
    pub objective: f64,
    pub evaluations: usize,
    pub converged: bool,
}

impl Calibration {
    pub fn report(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("objective: {:.6e}\n", self.objective));
        s.push_str(&format!("evaluations: {}\n", self.evaluations));
        s.push_str(&format!("converged: {}\n", self.converged));
        for (p, v) in &self.params {
            s.push_str(&format!("param.{}: {:.9e}\n", p, v));
        }
        for r in &self.residuals {
            let t = &r.target;
            let d = match t.discrimination {
                Discrimination::L0 => "L0",
                Discrimination::TwoL0 => "2L0",
            };
            let obs = serde_plain(t.observable);
            let line = match (r.satisfied_never_blind, r.achieved, r.ratio) {
                (Some(ok), _, _) => format!("{}", if ok { "ok" } else { "violated" }),
                (None, Some(a), Some(q)) => format!(
                    "target {:.3e} achieved {:.3e} ratio {:.3}",
                    t.power.unwrap_or_default(),
                    a,
                    q
                ),
                _ => "missing".to_string(),
            };
            s.push_str(&format!("target.{}@{:.0}ohm/{}: {}\n", obs, t.r_bias, d, line));
        }
        s
    }
}

fn serde_plain(o: Observable) -> &'static str {
    match o {
        Observable::BlindOnset => "blind_onset",
        Observable::Recovery => "recovery",
        Observable::BlindAt => "blind_at",
        Observable::NeverBlind => "never_blind",
        Observable::Heating => "heating",
    }
}

/// Fits `free_params` of `base` to `targets`. A non-converged fit is still
/// returned (best so far) with `converged == false`.
pub fn calibrate(
    targets: &[CalibrationTarget],
    free_params: &[FreeParam],
    base: &DetectorConfig,
    settings: &OptimizerSettings,
) -> Result<Calibration> {
    if targets.is_empty() {
        return Err(SimError::Usage("at least one calibration target is required".into()));
    }
    if free_params.is_empty() {
        return Err(SimError::Usage("at least one free parameter is required".into()));
    }
    for (i, t) in targets.iter().enumerate() {
        t.validate()?;
        if targets[..i].contains(t) {
            return Err(SimError::Usage(format!("duplicate calibration target #{i}")));
        }
    }
    for (i, p) in free_params.iter().enumerate() {
        if free_params[..i].contains(p) {
            return Err(SimError::Usage(format!("free parameter {p} listed twice")));
        }
    }
    base.validate()?;

    let build = |y: &[f64]| -> DetectorConfig {
        free_params
            .iter()
            .zip(y)
            .fold(base.clone(), |c, (p, v)| p.set(c, v.exp()))
    };
    let mut evaluations = 0usize;
    let mut objective = |y: &[f64]| -> f64 {
        evaluations += 1;
        let cfg = build(y);
        if cfg.validate().is_err() {
            return f64::INFINITY;
        }
        match evaluate_targets(&cfg, targets) {
            Ok(r) => r.iter().map(|t| t.cost).sum(),
            Err(_) => f64::INFINITY,
        }
    };

    let y0: Vec<f64> = free_params.iter().map(|p| p.get(base).ln()).collect();
    let mut starts = vec![y0.clone()];
    if let Some(spread) = settings.multi_start_spread {
        for j in 0..y0.len() {
            for sign in [-1.0, 1.0] {
                let mut y = y0.clone();
                y[j] += sign * spread;
                starts.push(y);
            }
        }
    }

    let per_start = settings.max_evaluations / starts.len();
    let mut best: Option<(Vec<f64>, f64, bool)> = None;
    for s in &starts {
        let (y, f, conv) = nelder_mead(&mut objective, s, settings, per_start.max(free_params.len() + 2));
        if best.as_ref().is_none_or(|b| f < b.1) {
            best = Some((y, f, conv));
        }
    }
    let (y, f, converged) = best.expect("at least one start");
    let fitted = build(&y);
    if !f.is_finite() {
        return Err(SimError::NoConvergence {
            what: "calibration objective",
            iterations: evaluations,
            residual: f,
        });
    }
    let residuals = evaluate_targets(&fitted, targets)?;
    Ok(Calibration {
        params: free_params.iter().map(|p| (*p, p.get(&fitted))).collect(),
        fitted,
        residuals,
        objective: f,
        evaluations,
        converged,
    })
}

/// Standard Nelder-Mead (reflection 1, expansion 2, contraction 0.5,
/// shrink 0.5). Returns the best vertex, its value and whether the
/// tolerances were met within `budget` evaluations.
fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    f: &mut F,
    y0: &[f64],
    settings: &OptimizerSettings,
    budget: usize,
) -> (Vec<f64>, f64, bool) {
    let n = y0.len();
    let mut used = 0usize;
    let mut eval = |y: &[f64], used: &mut usize| {
        *used += 1;
        f(y)
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let mut y = y0.to_vec();
        if i > 0 {
            y[i - 1] += settings.initial_step;
        }
        let v = eval(&y, &mut used);
        simplex.push((y, v));
    }
    let order = |s: &mut Vec<(Vec<f64>, f64)>| {
        s.sort_by(|a, b| a.1.total_cmp(&b.1));
    };
    loop {
        order(&mut simplex);
        let f_spread = simplex[n].1 - simplex[0].1;
        let x_spread = simplex
            .iter()
            .skip(1)
            .flat_map(|(y, _)| y.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if f_spread.is_finite() && f_spread <= settings.f_tolerance && x_spread <= settings.x_tolerance {
            return (simplex[0].0.clone(), simplex[0].1, true);
        }
        if used >= budget {
            return (simplex[0].0.clone(), simplex[0].1, false);
        }
        let centroid: Vec<f64> = (0..n)
            .map(|j| simplex[..n].iter().map(|(y, _)| y[j]).sum::<f64>() / n as f64)
            .collect();
        let worst = simplex[n].clone();
        let along = |t: f64| -> Vec<f64> {
            centroid.iter().zip(&worst.0).map(|(c, w)| c + t * (w - c)).collect()
        };
        let r = along(-1.0);
        let fr = eval(&r, &mut used);
        if fr < simplex[0].1 {
            let e = along(-2.0);
            let fe = eval(&e, &mut used);
            simplex[n] = if fe < fr { (e, fe) } else { (r, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (r, fr);
        } else {
            let k = if fr < worst.1 { along(-0.5) } else { along(0.5) };
            let fk = eval(&k, &mut used);
            if fk < worst.1.min(fr) {
                simplex[n] = (k, fk);
            } else {
                let best = simplex[0].0.clone();
                for v in simplex.iter_mut().skip(1) {
                    v.0 = v.0.iter().zip(&best).map(|(a, b)| b + 0.5 * (a - b)).collect();
                    v.1 = eval(&v.0, &mut used);
                }
            }
        }
    }
}
