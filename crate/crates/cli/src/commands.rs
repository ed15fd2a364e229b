use std::path::{Path, PathBuf};

use apdsim::attack::{
    assess_thermal_attack, design_trigger_pulse, find_blinding_window, AttackScenario,
};
use apdsim::calibrate::{
    calibrate, reference_targets, FreeParam, OptimizerSettings, REFERENCE_FREE_PARAMS,
};
use apdsim::detector::{detector_blind, simulate_gates, sweep_power, GateInput};
use apdsim::qkd::{run_bb84, AliceConfig, EveStrategy, Verdict, SESSION_CSV_HEADER};
use apdsim::sentinel::{alarms_to_csv, scan_current_trace, MonitorConfig};
use apdsim::{DetectorConfig, Preset};

use crate::manifest::Manifest;
use crate::{Command, Common, Failure};

struct Loaded {
    cfg: DetectorConfig,
    label: String,
    preset: Option<Preset>,
}

fn load_config(arg: &str) -> Result<Loaded, Failure> {
    if let Some(p) = Preset::from_name(arg) {
        return Ok(Loaded {
            cfg: p.config(),
            label: p.name().to_string(),
            preset: Some(p),
        });
    }
    let path = Path::new(arg);
    let text = std::fs::read_to_string(path).map_err(|e| {
        Failure::Input(format!("`{arg}` is neither a preset nor a readable file: {e}"))
    })?;
    Ok(Loaded {
        cfg: DetectorConfig::from_toml(&text)?,
        label: arg.to_string(),
        preset: None,
    })
}

fn out_path(common: &Common, default: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

/// `<out>` with its extension replaced by `ext`.
fn sibling(primary: &Path, ext: &str) -> PathBuf {
    primary.with_extension(ext)
}

/// Whether the published results say this preset has a blind window.
fn expected_blindable(p: Preset) -> bool {
    !matches!(p, Preset::ZeroRbias | Preset::Clavis2LikeL0)
}

struct Checks(Vec<String>);

impl Checks {
    fn new() -> Self {
        Checks(Vec::new())
    }

    fn expect(&mut self, ok: bool, what: impl Into<String>) {
        if !ok {
            self.0.push(what.into());
        }
    }

    fn finish(self, enabled: bool) -> Result<(), Failure> {
        if enabled && !self.0.is_empty() {
            Err(Failure::Check(self.0))
        } else {
            Ok(())
        }
    }
}

pub fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Sweep {
            common,
            pmin,
            pmax,
            points_per_decade,
        } => sweep(&common, pmin, pmax, points_per_decade),
        Command::Window { common, pmin, pmax } => window(&common, pmin, pmax),
        Command::Qkd {
            common,
            pulses,
            eve,
            monitor,
            mu,
            loss_db,
            p_blind,
            p_trigger,
        } => qkd(
            &common,
            QkdArgs {
                pulses,
                eve: eve.on(),
                monitor: monitor.on(),
                alice: AliceConfig {
                    mean_photon_number: mu,
                    channel_loss_db: loss_db,
                },
                p_blind,
                p_trigger,
            },
        ),
        Command::Thermal { common, power } => thermal(&common, power),
        Command::MonitorDemo {
            common,
            pulses,
            p_blind,
        } => monitor_demo(&common, pulses, p_blind),
        Command::Calibrate {
            common,
            free,
            max_evaluations,
        } => calibrate_cmd(&common, free, max_evaluations),
    }
}

fn sweep(common: &Common, pmin: f64, pmax: f64, ppd: usize) -> Result<(), Failure> {
    let l = load_config(&common.config)?;
    let curve = sweep_power(&l.cfg, pmin, pmax, ppd)?;
    let out = out_path(common, "sweep.csv");
    let mut m = Manifest::new("sweep", &l.label, &l.cfg.to_toml(), common.seed);
    m.param("pmin", pmin);
    m.param("pmax", pmax);
    m.param("points_per_decade", ppd);
    m.write(&out, &curve.to_csv())?;
    m.finish(&out)?;

    let blinded = curve.points.iter().filter(|p| p.blinded).count();
    println!("{}: {} points, {} blinded", l.label, curve.points.len(), blinded);

    let mut c = Checks::new();
    c.expect(
        curve.points.iter().all(|p| (0.0..=1.0).contains(&p.count_prob)),
        "count_prob outside [0, 1]",
    );
    c.expect(curve.blind_transitions() <= 2, "more than one blind window");
    if let Some(p) = l.preset {
        if expected_blindable(p) {
            c.expect(blinded > 0, format!("{p}: expected blinded rows"));
        } else {
            c.expect(blinded == 0, format!("{p}: expected no blinded rows"));
        }
    }
    c.finish(common.check)
}

fn window(common: &Common, pmin: f64, pmax: f64) -> Result<(), Failure> {
    let l = load_config(&common.config)?;
    let w = find_blinding_window(&l.cfg, pmin, pmax)?;
    let mut text = format!("config: {}\nscan_w: {:.6e} {:.6e}\n", l.label, pmin, pmax);
    match w {
        None => text.push_str("window: none\n"),
        Some(w) => text.push_str(&format!(
            "window: present\np_min_w: {:.6e}\np_max_w: {:.6e}\nlog_width_decades: {:.6}\n",
            w.p_min,
            w.p_max,
            w.log_width()
        )),
    }
    let out = out_path(common, "window.txt");
    let mut m = Manifest::new("window", &l.label, &l.cfg.to_toml(), common.seed);
    m.param("pmin", pmin);
    m.param("pmax", pmax);
    m.write(&out, &text)?;
    m.finish(&out)?;
    print!("{text}");

    let mut c = Checks::new();
    if let Some(p) = l.preset {
        c.expect(
            w.is_some() == expected_blindable(p),
            format!("{p}: window presence {}", w.is_some()),
        );
    }
    c.finish(common.check)
}

struct QkdArgs {
    pulses: usize,
    eve: bool,
    monitor: bool,
    alice: AliceConfig,
    p_blind: f64,
    p_trigger: Option<f64>,
}

fn qkd(common: &Common, a: QkdArgs) -> Result<(), Failure> {
    let l = load_config(&common.config)?;
    let cfg = &l.cfg;
    let mut notes = String::new();

    let eve = if a.eve {
        let p_trigger = match a.p_trigger {
            Some(p) => p,
            None => match design_trigger_pulse(cfg, a.p_blind)? {
                Ok(p) => {
                    notes.push_str("trigger_design: target detector\n");
                    p
                }
                Err(why) => {
                    // Eve cannot tailor a pulse to this detector; she keeps
                    // the one that works on the vulnerable reference.
                    let reference = Preset::Paper680k.config();
                    let p = design_trigger_pulse(&reference, a.p_blind)?.map_err(|w| {
                        Failure::Input(format!(
                            "no trigger pulse at p_blind {:e} W ({why}; reference: {w})",
                            a.p_blind
                        ))
                    })?;
                    notes.push_str(&format!("trigger_design: paper-680k reference ({why})\n"));
                    p
                }
            },
        };
        Some(EveStrategy {
            scenario: AttackScenario::faked_state(cfg, a.p_blind, p_trigger),
        })
    } else {
        None
    };
    let monitor = if a.monitor {
        Some(MonitorConfig::for_detector(cfg)?)
    } else {
        None
    };

    let stats = run_bb84(&a.alice, [cfg, cfg], a.pulses, eve.as_ref(), monitor.as_ref(), common.seed)?;
    let out = out_path(common, "qkd.csv");
    let mut m = Manifest::new("qkd", &l.label, &cfg.to_toml(), common.seed);
    m.param("pulses", a.pulses);
    m.param("eve", a.eve);
    m.param("monitor", a.monitor);
    m.param("mu", a.alice.mean_photon_number);
    m.param("loss_db", a.alice.channel_loss_db);
    if let Some(e) = &eve {
        m.param("p_blind", format!("{:.6e}", e.scenario.p_blind));
        m.param("p_trigger", format!("{:.6e}", e.scenario.p_trigger));
    }
    m.write(&out, &format!("{SESSION_CSV_HEADER}\n{}\n", stats.to_csv_row()))?;
    let mut text = stats.to_text();
    if let Some(e) = &eve {
        text.push_str(&format!(
            "p_blind_w: {:.6e}\np_trigger_w: {:.6e}\n",
            e.scenario.p_blind, e.scenario.p_trigger
        ));
    }
    text.push_str(&notes);
    m.write(&sibling(&out, "txt"), &text)?;
    m.finish(&out)?;
    print!("{text}");

    let verdict = stats.verdict();
    let mut c = Checks::new();
    match (a.eve, a.monitor) {
        (true, true) => c.expect(verdict == Verdict::AttackDetected, format!("verdict {verdict}")),
        (true, false) => {
            let blind = detector_blind(cfg, a.p_blind)?;
            let want = if blind { Verdict::AttackSuccessful } else { Verdict::AttackDetected };
            c.expect(verdict == want, format!("verdict {verdict}, expected {want}"));
        }
        (false, _) => {
            c.expect(stats.qber < 0.11, format!("qber {} without Eve", stats.qber));
            c.expect(stats.alarms == 0, format!("{} alarms without Eve", stats.alarms));
        }
    }
    c.finish(common.check)
}

fn thermal(common: &Common, power: f64) -> Result<(), Failure> {
    let l = load_config(&common.config)?;
    let r = assess_thermal_attack(&l.cfg, power)?;
    let text = format!("config: {}\n{}", l.label, r.to_text());
    let out = out_path(common, "thermal.txt");
    let mut m = Manifest::new("thermal", &l.label, &l.cfg.to_toml(), common.seed);
    m.param("power", power);
    m.write(&out, &text)?;
    m.finish(&out)?;
    print!("{text}");

    let mut c = Checks::new();
    c.expect(r.still_counting, "detector stopped counting");
    c.expect(!r.blinded_thermally, "detector blinded thermally");
    c.finish(common.check)
}

fn monitor_demo(common: &Common, pulses: usize, p_blind: f64) -> Result<(), Failure> {
    let l = load_config(&common.config)?;
    let cfg = &l.cfg;
    let mcfg = MonitorConfig::for_detector(cfg)?;

    // Legitimate traffic: one photon per gate on average, no CW light.
    let legit = simulate_gates(cfg, |_| GateInput::with_photons(cfg, 0.0, 1.0), pulses, common.seed)?;
    let legit_trace: Vec<(usize, f64)> = legit.iter().map(|r| (r.gate_index, r.i_inter_gate)).collect();
    let legit_alarms = scan_current_trace(&legit_trace, &mcfg)?;

    let attacked = simulate_gates(cfg, |_| GateInput::cw(p_blind), pulses, common.seed ^ 1)?;
    let attack_trace: Vec<(usize, f64)> =
        attacked.iter().map(|r| (r.gate_index, r.i_inter_gate)).collect();
    let attack_alarms = scan_current_trace(&attack_trace, &mcfg)?;
    let blind = detector_blind(cfg, p_blind)?;

    let out = out_path(common, "alarms.csv");
    let mut m = Manifest::new("monitor-demo", &l.label, &cfg.to_toml(), common.seed);
    m.param("pulses", pulses);
    m.param("p_blind", p_blind);
    m.write(&out, &alarms_to_csv(&attack_alarms))?;
    let text = format!(
        "config: {}\nthreshold_a: {:.6e}\nwindow: {}\nlegitimate_alarms: {}\nattack_p_blind_w: {:.6e}\nattack_blinds_detector: {}\nattack_alarms: {}\n",
        l.label,
        mcfg.threshold,
        mcfg.window,
        legit_alarms.len(),
        p_blind,
        blind,
        attack_alarms.len()
    );
    m.write(&sibling(&out, "txt"), &text)?;
    m.finish(&out)?;
    print!("{text}");

    let mut c = Checks::new();
    c.expect(legit_alarms.is_empty(), "false alarm on legitimate trace");
    if blind {
        c.expect(!attack_alarms.is_empty(), "blinding trace raised no alarm");
    }
    c.finish(common.check)
}

fn calibrate_cmd(
    common: &Common,
    free: Option<Vec<String>>,
    max_evaluations: usize,
) -> Result<(), Failure> {
    let l = load_config(&common.config)?;
    let free: Vec<FreeParam> = match free {
        None => REFERENCE_FREE_PARAMS.to_vec(),
        Some(names) => names
            .iter()
            .map(|n| {
                FreeParam::from_name(n.trim())
                    .ok_or_else(|| Failure::Input(format!("unknown free parameter `{n}`")))
            })
            .collect::<Result<_, _>>()?,
    };
    let settings = OptimizerSettings {
        max_evaluations,
        ..OptimizerSettings::default()
    };
    let targets = reference_targets();
    let fit = calibrate(&targets, &free, &l.cfg, &settings)?;

    let out = out_path(common, "calibrated.toml");
    let mut m = Manifest::new("calibrate", &l.label, &l.cfg.to_toml(), common.seed);
    m.param("free", free.iter().map(|p| p.name()).collect::<Vec<_>>().join(","));
    m.param("max_evaluations", max_evaluations);
    m.write(&out, &fit.fitted.to_toml())?;
    let report = fit.report();
    m.write(&sibling(&out, "txt"), &report)?;
    m.finish(&out)?;
    print!("{report}");

    if !fit.converged {
        return Err(Failure::Numeric(format!(
            "optimizer stopped after {} evaluations without meeting its tolerances; best fit written",
            fit.evaluations
        )));
    }
    let mut c = Checks::new();
    for r in &fit.residuals {
        if let Some(ok) = r.satisfied_never_blind {
            c.expect(ok, format!("{:?} at {} ohm has a window", r.target.observable, r.target.r_bias));
        } else {
            let ratio = r.ratio.unwrap_or(f64::INFINITY);
            c.expect(
                (1.0 / 3.0..=3.0).contains(&ratio),
                format!("{:?} at {} ohm: ratio {ratio:.3}", r.target.observable, r.target.r_bias),
            );
        }
    }
    c.finish(common.check)
}
