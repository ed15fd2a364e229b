//! Per-gate click logic and steady-state count probability under CW light.
//!
//! A gate registers a click when the sense-node signal (capacitive transient
//! plus whatever the diode adds) crosses the discrimination level. The diode
//! adds either a Geiger avalanche pulse, whose height scales with the excess
//! bias, or a linear-mode photocurrent step when bright light is present and
//! the gate pulse modulates its gain.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::circuit::{
    self, avalanche_pulse_amplitude, photon_energy, sense_pulse_amplitude, OperatingPoint,
    ThermalState,
};
use crate::config::DetectorConfig;
use crate::error::{Result, SimError};

const OUTER_TOLERANCE: f64 = 1e-6;
const OUTER_MAX_ITERATIONS: usize = 1000;
const OUTER_DAMPING: f64 = 0.5;

/// Mean photon number arriving in one gate at CW power `p`.
pub fn mean_photons_per_gate(cfg: &DetectorConfig, p: f64) -> f64 {
    p * cfg.gate_width / photon_energy(cfg)
}

/// Probability that a gate starts a Geiger avalanche: Poisson photon
/// statistics with efficiency `pde`, plus the dark count floor.
pub fn geiger_click_probability(cfg: &DetectorConfig, p_cw: f64, armed: bool) -> f64 {
    avalanche_probability_for_mean(cfg, mean_photons_per_gate(cfg, p_cw.max(0.0)), armed)
}

fn avalanche_probability_for_mean(cfg: &DetectorConfig, mu: f64, armed: bool) -> f64 {
    if !armed {
        return 0.0;
    }
    cfg.dark_prob - (1.0 - cfg.dark_prob) * (-cfg.pde * mu).exp_m1()
}

/// True when an avalanche at this operating point would cross the
/// discrimination level. An armed diode with too little excess bias
/// produces pulses the comparator never sees.
pub fn geiger_registrable(cfg: &DetectorConfig, op: &OperatingPoint) -> bool {
    op.geiger_armed
        && cfg.v_cap_transient + avalanche_pulse_amplitude(cfg, op.excess_bias)
            > cfg.discrimination_level
}

/// Smallest excess bias whose avalanche pulse still registers.
pub fn minimum_registrable_excess(cfg: &DetectorConfig) -> f64 {
    let margin = (cfg.discrimination_level - cfg.v_cap_transient).max(0.0);
    margin * (cfg.r_diode + cfg.r_sense) / cfg.r_sense
}

/// Linear-mode ("classical") click: capacitive transient plus the
/// gate-modulated photocurrent step exceeds L. Deterministic.
pub fn classical_click(
    cfg: &DetectorConfig,
    op_off: &OperatingPoint,
    p_during_gate: f64,
    thermal: &ThermalState,
) -> (bool, f64) {
    let dv = sense_pulse_amplitude(cfg, op_off, p_during_gate, thermal);
    (cfg.v_cap_transient + dv > cfg.discrimination_level, dv)
}

/// Which mechanism produced a click.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    Geiger,
    Classical,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClickRecord {
    pub gate_index: usize,
    pub clicked: bool,
    pub mechanism: Mechanism,
    pub delta_v_sense: f64,
    pub v_gate_peak: f64,
    /// Average bias current over this gate period, including the charge of
    /// an avalanche if one occurred.
    pub i_avg: f64,
    /// Diode current between gates (photocurrent plus leakage).
    pub i_inter_gate: f64,
}

/// One point of a count-probability vs. CW power curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub p_cw: f64,
    pub count_prob: f64,
    /// Probability of a registered Geiger click.
    pub geiger_component: f64,
    /// 1 when the gate-modulated photocurrent alone crosses L, else 0.
    pub classical_component: f64,
    pub blinded: bool,
    pub i_avg: f64,
    pub v_apd_off: f64,
    pub geiger_armed: bool,
    pub geiger_registrable: bool,
    /// Avalanche probability used in the bias-node feedback.
    pub avalanche_prob: f64,
    pub delta_v_sense: f64,
    pub t_junction: f64,
}

/// Full steady state at one CW power: the sweep point plus the operating
/// point and thermal state it was derived from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteadyState {
    pub point: SweepPoint,
    pub op: OperatingPoint,
    pub thermal: ThermalState,
}

struct Evaluation {
    thermal: ThermalState,
    op: OperatingPoint,
    next_prob: f64,
}

fn evaluate(cfg: &DetectorConfig, p_cw: f64, click_prob: f64) -> Result<Evaluation> {
    let (thermal, op) = circuit::thermal_fixed_point(cfg, p_cw, click_prob)?;
    let avalanche = geiger_click_probability(cfg, p_cw, op.geiger_armed);
    let (classical, _) = classical_click(cfg, &op, p_cw, &thermal);
    let next_prob = if classical { 1.0 } else { avalanche };
    Ok(Evaluation {
        thermal,
        op,
        next_prob: avalanche.max(next_prob),
    })
}

/// Outer fixed point over the avalanche probability that feeds charge back
/// into the bias node. Starts from a fully clicking detector and relaxes with
/// damping 0.5. When a proposed probability reproduces itself the iteration
/// jumps straight to it, which is the limit the damped sequence converges to.
pub fn steady_state(cfg: &DetectorConfig, p_cw: f64) -> Result<SteadyState> {
    if !(p_cw >= 0.0) {
        return Err(SimError::invalid("p_cw", format!("must be >= 0, got {p_cw}")));
    }
    let wrap = |e: SimError| e.at_power(p_cw);
    let mut p = 1.0;
    let mut eval = evaluate(cfg, p_cw, p).map_err(wrap)?;
    let mut converged = false;
    for _ in 0..OUTER_MAX_ITERATIONS {
        let proposal = eval.next_prob;
        if (proposal - p).abs() <= OUTER_TOLERANCE {
            converged = true;
            break;
        }
        let at_proposal = evaluate(cfg, p_cw, proposal).map_err(wrap)?;
        if (at_proposal.next_prob - proposal).abs() <= OUTER_TOLERANCE {
            p = proposal;
            eval = at_proposal;
            converged = true;
            break;
        }
        p += OUTER_DAMPING * (proposal - p);
        eval = evaluate(cfg, p_cw, p).map_err(wrap)?;
    }
    if !converged {
        return Err(SimError::NoConvergence {
            what: "click-probability fixed point",
            iterations: OUTER_MAX_ITERATIONS,
            residual: (eval.next_prob - p).abs(),
        }
        .at_power(p_cw));
    }

    let Evaluation { thermal, op, .. } = eval;
    let avalanche = geiger_click_probability(cfg, p_cw, op.geiger_armed);
    let registrable = geiger_registrable(cfg, &op);
    let geiger = if registrable { avalanche } else { 0.0 };
    let (classical, dv) = classical_click(cfg, &op, p_cw, &thermal);
    let classical_component = if classical { 1.0 } else { 0.0 };
    let count_prob = geiger.max(classical_component);
    Ok(SteadyState {
        point: SweepPoint {
            p_cw,
            count_prob,
            geiger_component: geiger,
            classical_component,
            blinded: count_prob == 0.0 && !registrable,
            i_avg: op.i_total,
            v_apd_off: op.v_apd,
            geiger_armed: op.geiger_armed,
            geiger_registrable: registrable,
            avalanche_prob: avalanche,
            delta_v_sense: dv,
            t_junction: thermal.t_junction,
        },
        op,
        thermal,
    })
}

/// Steady-state count probability per gate under CW power `p_cw`.
pub fn count_probability(cfg: &DetectorConfig, p_cw: f64) -> Result<SweepPoint> {
    steady_state(cfg, p_cw).map(|s| s.point)
}

/// Blind to single photons: no counts, and one extra photon per gate on
/// average still produces no registered click.
pub fn detector_blind(cfg: &DetectorConfig, p_cw: f64) -> Result<bool> {
    let s = steady_state(cfg, p_cw)?;
    if s.point.count_prob != 0.0 {
        return Ok(false);
    }
    let mu = mean_photons_per_gate(cfg, p_cw) + 1.0;
    let extra = avalanche_probability_for_mean(cfg, mu, geiger_registrable(cfg, &s.op));
    Ok(extra == 0.0)
}

/// Count probability vs. CW power.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCurve {
    pub config: DetectorConfig,
    pub points: Vec<SweepPoint>,
}

pub const SWEEP_CSV_HEADER: &str =
    "power_w,count_prob,geiger_component,classical_component,blinded,v_apd_off,i_avg_a";

impl SweepCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.points.len() + 1));
        out.push_str(SWEEP_CSV_HEADER);
        out.push('\n');
        for p in &self.points {
            out.push_str(&format!(
                "{:.6e},{:.9},{:.9},{},{},{:.9},{:.6e}\n",
                p.p_cw,
                p.count_prob,
                p.geiger_component,
                p.classical_component as u8,
                p.blinded,
                p.v_apd_off,
                p.i_avg
            ));
        }
        out
    }

    /// Number of times the blinded flag flips along the curve.
    pub fn blind_transitions(&self) -> usize {
        self.points
            .windows(2)
            .filter(|w| w[0].blinded != w[1].blinded)
            .count()
    }
}

/// Log-spaced powers from `p_min` to `p_max` inclusive.
pub fn log_grid(p_min: f64, p_max: f64, points_per_decade: usize) -> Result<Vec<f64>> {
    if !(p_min > 0.0 && p_max > p_min && p_max.is_finite()) {
        return Err(SimError::invalid(
            "p_min",
            format!("need 0 < p_min < p_max, got [{p_min}, {p_max}]"),
        ));
    }
    if points_per_decade < 1 {
        return Err(SimError::invalid("points_per_decade", "must be >= 1"));
    }
    let decades = (p_max / p_min).log10();
    let steps = (decades * points_per_decade as f64 - 1e-9).ceil().max(1.0) as usize;
    let lmin = p_min.log10();
    Ok((0..=steps)
        .map(|i| {
            if i == steps {
                p_max
            } else {
                10f64.powf(lmin + decades * i as f64 / steps as f64)
            }
        })
        .collect())
}

pub fn sweep_power(
    cfg: &DetectorConfig,
    p_min: f64,
    p_max: f64,
    points_per_decade: usize,
) -> Result<SweepCurve> {
    cfg.validate()?;
    let powers = log_grid(p_min, p_max, points_per_decade)?;
    let points = powers
        .into_iter()
        .map(|p| count_probability(cfg, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepCurve {
        config: cfg.clone(),
        points,
    })
}

/// Optical input for one gate: the CW level plus any pulse energy that
/// lands inside the gate, expressed as an added power over the gate width.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GateInput {
    pub cw: f64,
    pub pulse: f64,
}

impl GateInput {
    pub fn cw(cw: f64) -> Self {
        GateInput { cw, pulse: 0.0 }
    }

    /// A coherent pulse of `mean_photons` on top of `cw`.
    pub fn with_photons(cfg: &DetectorConfig, cw: f64, mean_photons: f64) -> Self {
        GateInput {
            cw,
            pulse: mean_photons * photon_energy(cfg) / cfg.gate_width,
        }
    }
}

/// Gate-by-gate Monte Carlo driver for one detector. Owns its random stream;
/// the quiescent state is recomputed whenever the CW level changes.
pub struct GateSimulator {
    cfg: DetectorConfig,
    rng: ChaCha8Rng,
    gate_index: usize,
    cached: Option<(f64, SteadyState)>,
}

impl GateSimulator {
    pub fn new(cfg: DetectorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(GateSimulator {
            cfg,
            rng: ChaCha8Rng::seed_from_u64(seed),
            gate_index: 0,
            cached: None,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    fn quiescent(&mut self, cw: f64) -> Result<SteadyState> {
        match self.cached {
            Some((p, s)) if p == cw => Ok(s),
            _ => {
                let s = steady_state(&self.cfg, cw)?;
                self.cached = Some((cw, s));
                Ok(s)
            }
        }
    }

    pub fn step(&mut self, input: GateInput) -> Result<ClickRecord> {
        if !(input.pulse >= 0.0) {
            return Err(SimError::invalid("pulse", "must be >= 0"));
        }
        let s = self.quiescent(input.cw)?;
        let cfg = &self.cfg;
        let in_gate = input.cw + input.pulse;
        let registrable = geiger_registrable(cfg, &s.op);
        let p_geiger = geiger_click_probability(cfg, in_gate, s.op.geiger_armed);
        // Always draw so the random stream does not depend on the branch.
        let u: f64 = self.rng.gen();
        let avalanche = u < p_geiger;
        let (classical, dv) = classical_click(cfg, &s.op, in_gate, &s.thermal);

        let mechanism = if avalanche && registrable {
            Mechanism::Geiger
        } else if classical {
            Mechanism::Classical
        } else {
            Mechanism::None
        };
        let q = if avalanche {
            circuit::avalanche_charge(cfg, s.op.v_gate_peak(cfg), s.thermal.v_b_effective)
        } else {
            0.0
        };
        let delta_v_sense = match mechanism {
            Mechanism::Geiger => avalanche_pulse_amplitude(cfg, s.op.excess_bias).max(dv),
            _ => dv,
        };
        let record = ClickRecord {
            gate_index: self.gate_index,
            clicked: mechanism != Mechanism::None,
            mechanism,
            delta_v_sense,
            v_gate_peak: s.op.v_gate_peak(cfg),
            i_avg: s.op.i_photo + s.op.i_dark + q * cfg.gate_rate,
            i_inter_gate: s.op.i_photo + s.op.i_dark,
        };
        self.gate_index += 1;
        Ok(record)
    }
}

/// Runs `n_gates` gates. `timeline(i)` supplies the optical input of gate `i`.
pub fn simulate_gates<F>(
    cfg: &DetectorConfig,
    mut timeline: F,
    n_gates: usize,
    seed: u64,
) -> Result<Vec<ClickRecord>>
where
    F: FnMut(usize) -> GateInput,
{
    if n_gates < 1 {
        return Err(SimError::invalid("n_gates", "must be >= 1"));
    }
    let mut sim = GateSimulator::new(cfg.clone(), seed)?;
    (0..n_gates).map(|i| sim.step(timeline(i))).collect()
}
