//! One PASS/FAIL line per acceptance criterion. Exits non-zero if any fail.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use apdsim::attack::{assess_thermal_attack, design_trigger_pulse, find_blinding_window, AttackScenario};
use apdsim::calibrate::{
    calibrate, evaluate_targets, reference_targets, CalibrationTarget, FreeParam, Observable,
    OptimizerSettings, REFERENCE_FREE_PARAMS,
};
use apdsim::circuit::{quiescent_mismatch, solve_quiescent_point, ThermalState};
use apdsim::detector::{count_probability, log_grid, simulate_gates, sweep_power, GateInput};
use apdsim::qkd::{run_bb84, AliceConfig, EveStrategy, Verdict};
use apdsim::sentinel::{scan_current_trace, MonitorConfig};
use apdsim::{DetectorConfig, Discrimination, Preset, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SCAN: (f64, f64) = (1e-12, 0.1);
/// Multiplicative tolerance on published powers.
const POWER_FACTOR: f64 = 3.0;
const HEAT_FACTOR: f64 = 2.0;

const QKD_PULSES: usize = 100_000;
const QKD_SEED: u64 = 2024;
const P_BLIND: f64 = 1e-6;

struct Outcome {
    pass: bool,
    detail: String,
}

fn within(x: f64, target: f64, factor: f64) -> bool {
    x >= target / factor && x <= target * factor
}

fn run(id: u32, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Result<Outcome>) -> bool {
    let t = Instant::now();
    let outcome = f().unwrap_or_else(|e| Outcome {
        pass: false,
        detail: format!("error: {e}"),
    });
    let elapsed = t.elapsed();
    let in_time = limit.is_none_or(|l| elapsed <= l);
    let pass = outcome.pass && in_time;
    let budget = limit.map(|l| format!(" / {:.0} s", l.as_secs_f64())).unwrap_or_default();
    println!(
        "{} {id}. {name}: {} [{:.1} s{budget}]",
        if pass { "PASS" } else { "FAIL" },
        outcome.detail,
        elapsed.as_secs_f64()
    );
    pass
}

fn onset(cfg: &DetectorConfig) -> Result<Option<(f64, f64)>> {
    Ok(find_blinding_window(cfg, SCAN.0, SCAN.1)?.map(|w| (w.p_min, w.p_max)))
}

fn criterion_1() -> Result<Outcome> {
    // Polish the shipped calibration against the reference targets; the
    // budget keeps this inside the time limit.
    let settings = OptimizerSettings {
        max_evaluations: 40,
        ..OptimizerSettings::default()
    };
    let fit = calibrate(&reference_targets(), &REFERENCE_FREE_PARAMS, &DetectorConfig::default(), &settings)?;
    let base = fit.fitted;
    let mut pass = true;
    let mut parts = vec![format!("objective {:.3}", fit.objective)];
    for (r, target) in [(680e3, 22e-9), (330e3, 350e-9), (100e3, 2.4e-6)] {
        let cfg = base.clone().with_r_bias(r).with_discrimination(Discrimination::TwoL0);
        match onset(&cfg)? {
            Some((lo, _)) => {
                pass &= within(lo, target, POWER_FACTOR);
                parts.push(format!("{:.0}k onset {lo:.3e} (x{:.2})", r / 1e3, lo / target));
            }
            None => {
                pass = false;
                parts.push(format!("{:.0}k no window", r / 1e3));
            }
        }
    }
    let clavis = base
        .clone()
        .with_r_bias(1e3)
        .with_capacitive_signal(apdsim::config::CLAVIS2_V_CAP, Discrimination::TwoL0);
    match onset(&clavis)? {
        Some((lo, hi)) => {
            pass &= lo <= 260e-6 * POWER_FACTOR && hi >= 260e-6 / POWER_FACTOR;
            parts.push(format!("1k/2L0 window [{lo:.3e}, {hi:.3e}]"));
        }
        None => {
            pass = false;
            parts.push("1k/2L0 no window".into());
        }
    }
    Ok(Outcome {
        pass,
        detail: parts.join(", "),
    })
}

fn resistor_windows() -> Result<Vec<(Preset, Option<(f64, f64)>)>> {
    [Preset::Paper100k, Preset::Paper330k, Preset::Paper680k]
        .into_iter()
        .map(|p| Ok((p, onset(&p.config())?)))
        .collect()
}

fn criterion_2() -> Result<Outcome> {
    let w = resistor_windows()?;
    let Some(ws) = w.iter().map(|(_, w)| *w).collect::<Option<Vec<_>>>() else {
        return Ok(Outcome {
            pass: false,
            detail: "a resistor preset has no window".into(),
        });
    };
    let widths: Vec<f64> = ws.iter().map(|(lo, hi)| (hi / lo).ln()).collect();
    let pass = ws[0].0 > ws[1].0 && ws[1].0 > ws[2].0 && widths[0] < widths[1] && widths[1] < widths[2];
    Ok(Outcome {
        pass,
        detail: format!(
            "onsets 100k/330k/680k {:.3e} > {:.3e} > {:.3e}, ln-widths {:.2} < {:.2} < {:.2}",
            ws[0].0, ws[1].0, ws[2].0, widths[0], widths[1], widths[2]
        ),
    })
}

fn criterion_3() -> Result<Outcome> {
    let w = resistor_windows()?;
    let Some(highs) = w.iter().map(|(_, w)| w.map(|x| x.1)).collect::<Option<Vec<_>>>() else {
        return Ok(Outcome {
            pass: false,
            detail: "a resistor preset has no window".into(),
        });
    };
    let max = highs.iter().cloned().fold(f64::MIN, f64::max);
    let min = highs.iter().cloned().fold(f64::MAX, f64::min);
    let pass = highs.iter().all(|&h| within(h, 20e-6, POWER_FACTOR)) && max / min <= POWER_FACTOR;
    Ok(Outcome {
        pass,
        detail: format!(
            "upper edges 100k/330k/680k {:.3e}, {:.3e}, {:.3e} (spread x{:.2})",
            highs[0],
            highs[1],
            highs[2],
            max / min
        ),
    })
}

fn criterion_4() -> Result<Outcome> {
    let zero = onset(&Preset::ZeroRbias.config())?;
    let l0 = onset(&Preset::Clavis2LikeL0.config())?;
    Ok(Outcome {
        pass: zero.is_none() && l0.is_none(),
        detail: format!("zero-rbias {:?}, clavis2-like-L0 {:?}", zero, l0),
    })
}

fn criterion_5() -> Result<Outcome> {
    let r = assess_thermal_attack(&Preset::Clavis2LikeL0.config(), 17.8e-3)?;
    Ok(Outcome {
        pass: r.still_counting && !r.blinded_thermally && within(r.p_heat, 0.5, HEAT_FACTOR),
        detail: format!(
            "still_counting {}, blinded_thermally {}, p_heat {:.3} W, T {:.2} K",
            r.still_counting, r.blinded_thermally, r.p_heat, r.t_junction
        ),
    })
}

fn faked_state_eve() -> Result<std::result::Result<EveStrategy, String>> {
    let cfg = Preset::Paper680k.config();
    Ok(design_trigger_pulse(&cfg, P_BLIND)?
        .map(|t| EveStrategy {
            scenario: AttackScenario::faked_state(&cfg, P_BLIND, t),
        })
        .map_err(|e| e.to_string()))
}

fn criterion_6() -> Result<Outcome> {
    let eve = match faked_state_eve()? {
        Ok(e) => e,
        Err(why) => {
            return Ok(Outcome {
                pass: false,
                detail: format!("no trigger: {why}"),
            })
        }
    };
    let cfg = Preset::Paper680k.config();
    let alice = AliceConfig::default();
    let open = run_bb84(&alice, [&cfg, &cfg], QKD_PULSES, Some(&eve), None, QKD_SEED)?;
    let m = MonitorConfig::for_detector(&cfg)?;
    let watched = run_bb84(&alice, [&cfg, &cfg], QKD_PULSES, Some(&eve), Some(&m), QKD_SEED)?;
    Ok(Outcome {
        pass: open.qber < 0.01
            && open.eve_information > 0.99
            && watched.alarms > 0
            && watched.verdict() == Verdict::AttackDetected,
        detail: format!(
            "trigger {:.3e} W; unmonitored qber {:.4} eve_info {:.4} ({}); monitored alarms {} ({})",
            eve.scenario.p_trigger,
            open.qber,
            open.eve_information,
            open.verdict(),
            watched.alarms,
            watched.verdict()
        ),
    })
}

fn criterion_7() -> Result<Outcome> {
    let eve = match faked_state_eve()? {
        Ok(e) => e,
        Err(why) => {
            return Ok(Outcome {
                pass: false,
                detail: format!("no trigger: {why}"),
            })
        }
    };
    let cfg = Preset::Clavis2LikeL0.config();
    let s = run_bb84(&AliceConfig::default(), [&cfg, &cfg], QKD_PULSES, Some(&eve), None, QKD_SEED)?;
    Ok(Outcome {
        pass: (s.always_click_rate > 0.5 || s.double_click_rate > 0.25)
            && s.verdict() == Verdict::AttackDetected,
        detail: format!(
            "always_click_rate {:.3}, double_click_rate {:.3}, qber {:.3} ({})",
            s.always_click_rate,
            s.double_click_rate,
            s.qber,
            s.verdict()
        ),
    })
}

/// Root of the monotone mismatch by a two-level grid scan at 1e-6 v_dc.
fn grid_root(f: impl Fn(f64) -> f64, v_dc: f64) -> f64 {
    const N: usize = 1000;
    if f(0.0) >= 0.0 {
        return 0.0;
    }
    if f(v_dc) <= 0.0 {
        return v_dc;
    }
    let first = |lo: f64, step: f64| (1..=N).find(|&k| f(lo + k as f64 * step) >= 0.0).unwrap();
    let coarse = v_dc / N as f64;
    let lo = (first(0.0, coarse) - 1) as f64 * coarse;
    let fine = coarse / N as f64;
    lo + (first(lo, fine) as f64 - 0.5) * fine
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (rng.gen_range(lo.ln()..hi.ln())).exp()
}

fn within_5_sigma(k: usize, n: usize, p: f64) -> bool {
    let sigma = (n as f64 * p * (1.0 - p)).sqrt().max(0.2);
    (k as f64 - n as f64 * p).abs() <= 5.0 * sigma
}

fn criterion_8() -> Result<Outcome> {
    let mut failed = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);

    // Solver against the grid oracle.
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let cfg = DetectorConfig {
            r_bias: if rng.gen_bool(0.1) { 0.0 } else { log_uniform(&mut rng, 1.0, 1e7) },
            gain_exponent: rng.gen_range(0.03..3.0),
            unity_responsivity: log_uniform(&mut rng, 0.05, 1.0),
            c_diode: log_uniform(&mut rng, 1e-13, 1e-10),
            r_diode: log_uniform(&mut rng, 1.0, 1e4),
            gain_cap: log_uniform(&mut rng, 10.0, 1e4),
            ..DetectorConfig::default()
        };
        let p = log_uniform(&mut rng, 1e-13, 0.1);
        let click = rng.gen_range(0.0..=1.0);
        let th = ThermalState::at(&cfg, cfg.t_ref + rng.gen_range(0.0..20.0), 0.0);
        let op = solve_quiescent_point(&cfg, p, click, &th)?;
        let oracle = grid_root(|v| quiescent_mismatch(&cfg, p, click, &th, v), cfg.v_dc);
        worst = worst.max((op.v_apd - oracle).abs() / cfg.v_dc);
    }
    if worst > 1e-6 {
        failed.push(format!("solver oracle {worst:.2e} v_dc"));
    }

    // count_prob range and one window per sweep.
    for r in [1e3, 3e3, 1e4, 3e4, 1e5, 3e5, 1e6] {
        for d in [Discrimination::L0, Discrimination::TwoL0] {
            let cfg = Preset::Paper680k.config().with_r_bias(r).with_discrimination(d);
            let curve = sweep_power(&cfg, SCAN.0, SCAN.1, 10)?;
            if curve.points.iter().any(|p| !(0.0..=1.0).contains(&p.count_prob)) {
                failed.push(format!("count_prob range at {r}"));
            }
            if curve.blind_transitions() > 2 {
                failed.push(format!("{} transitions at {r}", curve.blind_transitions()));
            }
        }
    }

    // Raising L never unblinds.
    for r in [1e3, 1e4, 1e5, 6.8e5] {
        let at = |m: f64| {
            let c = Preset::Paper680k.config().with_r_bias(r);
            DetectorConfig {
                discrimination_level: m * apdsim::config::discrimination_floor(&c),
                ..c
            }
        };
        let (low, high) = (at(1.5), at(2.5));
        for p in log_grid(SCAN.0, SCAN.1, 5)? {
            if count_probability(&low, p)?.blinded && !count_probability(&high, p)?.blinded {
                failed.push(format!("L-monotonicity at {r}, {p:e}"));
            }
        }
    }

    // Monte Carlo against the steady state.
    for (k, p) in [0.0, 1e-13, 1e-12, 1e-11, 1e-8, 1e-6, 1e-3].into_iter().enumerate() {
        let cfg = Preset::Paper330k.config();
        let n = 20_000;
        let want = count_probability(&cfg, p)?.count_prob;
        let got = simulate_gates(&cfg, |_| GateInput::cw(p), n, k as u64)?
            .iter()
            .filter(|r| r.clicked)
            .count();
        if !within_5_sigma(got, n, want) {
            failed.push(format!("Monte Carlo at {p:e}: {got}/{n} vs {want}"));
        }
    }

    // Sentinel: silent on legitimate traces, loud on every blinding power.
    for seed in 0..100u64 {
        let cfg = Preset::ALL[seed as usize % Preset::ALL.len()].config();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let means: Vec<f64> = (0..2000).map(|_| r.gen_range(0.0..=1.0)).collect();
        let recs = simulate_gates(&cfg, |i| GateInput::with_photons(&cfg, 0.0, means[i]), 2000, seed)?;
        let trace: Vec<_> = recs.iter().map(|r| (r.gate_index, r.i_inter_gate)).collect();
        if !scan_current_trace(&trace, &MonitorConfig::for_detector(&cfg)?)?.is_empty() {
            failed.push(format!("false alarm, seed {seed}"));
        }
    }
    for preset in [Preset::Paper680k, Preset::Paper330k, Preset::Paper100k, Preset::Clavis2Like2L0] {
        let cfg = preset.config();
        let Some(w) = find_blinding_window(&cfg, SCAN.0, SCAN.1)? else {
            failed.push(format!("{preset} not blindable"));
            continue;
        };
        for p in log_grid(w.p_min, w.p_max, 10)? {
            let recs = simulate_gates(&cfg, |_| GateInput::cw(p), 200, 1)?;
            let trace: Vec<_> = recs.iter().map(|r| (r.gate_index, r.i_inter_gate)).collect();
            if scan_current_trace(&trace, &MonitorConfig::for_detector(&cfg)?)?.is_empty() {
                failed.push(format!("{preset} silent at {p:e}"));
            }
        }
    }

    // Calibration recovers parameters it generated.
    let truth = DetectorConfig {
        unity_responsivity: 0.8 * Preset::Paper680k.config().unity_responsivity,
        c_diode: 1.1 * Preset::Paper680k.config().c_diode,
        ..Preset::Paper680k.config()
    };
    let probe: Vec<_> = [680e3, 330e3, 100e3]
        .into_iter()
        .flat_map(|r| {
            [Observable::BlindOnset, Observable::Recovery]
                .map(|o| CalibrationTarget::new(r, o, Some(1e-6), Discrimination::TwoL0))
        })
        .collect();
    let targets: Vec<_> = evaluate_targets(&truth, &probe)?
        .into_iter()
        .map(|r| CalibrationTarget {
            power: r.achieved,
            ..r.target
        })
        .collect();
    let start = DetectorConfig {
        unity_responsivity: 1.2 * truth.unity_responsivity,
        c_diode: 0.92 * truth.c_diode,
        ..truth.clone()
    };
    let fit = calibrate(
        &targets,
        &[FreeParam::UnityResponsivity, FreeParam::CDiode],
        &start,
        &OptimizerSettings::default(),
    )?;
    for (p, v) in &fit.params {
        if (v / p.get(&truth) - 1.0).abs() > 0.05 {
            failed.push(format!("calibration recovered {p} = {v:e}"));
        }
    }

    // Byte-identical outputs for a fixed seed.
    let cfg = Preset::Paper680k.config();
    let csv = || sweep_power(&cfg, 1e-9, 1e-5, 5).map(|c| c.to_csv());
    let row = || run_bb84(&AliceConfig::default(), [&cfg, &cfg], 2000, None, None, 3).map(|s| s.to_csv_row());
    if csv()? != csv()? || row()? != row()? {
        failed.push("outputs differ between identical runs".into());
    }

    Ok(Outcome {
        pass: failed.is_empty(),
        detail: if failed.is_empty() {
            format!("all suites hold (solver worst {worst:.1e} v_dc)")
        } else {
            failed.join("; ")
        },
    })
}

fn main() -> ExitCode {
    // The libtest flags cargo passes (e.g. --nocapture) are irrelevant here.
    let t = Instant::now();
    let results = [
        run(1, "calibrated blinding thresholds", Some(Duration::from_secs(60)), criterion_1),
        run(2, "threshold ordering", None, criterion_2),
        run(3, "recovery universality", None, criterion_3),
        run(4, "immunity cases", None, criterion_4),
        run(5, "thermal attack", Some(Duration::from_secs(5)), criterion_5),
        run(6, "QKD attack reproduction", Some(Duration::from_secs(120)), criterion_6),
        run(7, "QKD attack failure", None, criterion_7),
        run(8, "property suites", Some(Duration::from_secs(600)), criterion_8),
    ];
    let passed = results.iter().filter(|&&p| p).count();
    println!("{passed}/{} criteria passed in {:.1} s", results.len(), t.elapsed().as_secs_f64());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
