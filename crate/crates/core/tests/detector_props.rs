use apdsim::attack::find_blinding_window;
use apdsim::detector::{
    count_probability, detector_blind, log_grid, simulate_gates, sweep_power, GateInput,
    Mechanism,
};
use apdsim::{DetectorConfig, Preset};
use proptest::prelude::*;

fn log_uniform(lo: f64, hi: f64) -> impl Strategy<Value = f64> {
    (lo.ln()..hi.ln()).prop_map(f64::exp)
}

/// Calibrated detector at an arbitrary bias resistor and discriminator.
fn detector(r_bias: f64, l_multiple: f64) -> DetectorConfig {
    let cfg = Preset::Paper680k.config().with_r_bias(r_bias);
    let floor = apdsim::config::discrimination_floor(&cfg);
    DetectorConfig {
        discrimination_level: l_multiple * floor,
        ..cfg
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn count_prob_is_a_probability(
        r in prop_oneof![Just(0.0), log_uniform(1e2, 1e7)],
        l in 1.0f64..4.0,
        p in prop_oneof![Just(0.0), log_uniform(1e-13, 0.1)],
    ) {
        let cfg = detector(r, l);
        let a = count_probability(&cfg, p).unwrap();
        prop_assert!((0.0..=1.0).contains(&a.count_prob));
        prop_assert!((0.0..=1.0).contains(&a.geiger_component));
        // Pure function of its inputs.
        prop_assert_eq!(a, count_probability(&cfg, p).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn at_most_one_blind_window(r in log_uniform(1e3, 1e6)) {
        let cfg = detector(r, 2.0);
        let curve = sweep_power(&cfg, 1e-12, 0.1, 10).unwrap();
        prop_assert!(curve.blind_transitions() <= 2, "{} transitions", curve.blind_transitions());
    }

    #[test]
    fn raising_the_discriminator_only_grows_the_blind_set(
        r in log_uniform(1e3, 1e6),
        a in 1.0f64..3.0,
        b in 1.0f64..3.0,
    ) {
        let (l1, l2) = if a <= b { (a, b) } else { (b, a) };
        let low = detector(r, l1);
        let high = detector(r, l2);
        for p in log_grid(1e-12, 0.1, 5).unwrap() {
            let blind_low = count_probability(&low, p).unwrap().blinded;
            let blind_high = count_probability(&high, p).unwrap().blinded;
            prop_assert!(!blind_low || blind_high, "blind at L={l1} but not L={l2}, {p:e} W");
        }
    }
}

#[test]
fn resistor_presets_have_one_window_each() {
    for preset in [Preset::Paper680k, Preset::Paper330k, Preset::Paper100k, Preset::Clavis2Like2L0] {
        let curve = sweep_power(&preset.config(), 1e-12, 0.1, 25).unwrap();
        assert_eq!(curve.blind_transitions(), 2, "{preset}");
    }
}

#[test]
fn windows_narrow_as_the_bias_resistor_shrinks() {
    let width = |p: Preset| {
        find_blinding_window(&p.config(), 1e-12, 0.1)
            .unwrap()
            .expect("blindable")
            .log_width()
    };
    let (w680, w330, w100) = (width(Preset::Paper680k), width(Preset::Paper330k), width(Preset::Paper100k));
    assert!(w680 > w330 && w330 > w100, "{w680} {w330} {w100}");
}

#[test]
fn immune_presets_never_blind() {
    for preset in [Preset::ZeroRbias, Preset::Clavis2LikeL0] {
        let curve = sweep_power(&preset.config(), 1e-12, 0.1, 25).unwrap();
        assert!(curve.points.iter().all(|p| !p.blinded), "{preset}");
    }
    // Zero resistor: nothing but the dark floor and rising counts.
    let curve = sweep_power(&Preset::ZeroRbias.config(), 1e-12, 0.1, 25).unwrap();
    let cfg = Preset::ZeroRbias.config();
    for w in curve.points.windows(2) {
        assert!(w[1].count_prob >= w[0].count_prob);
    }
    assert!(curve.points.iter().all(|p| p.count_prob >= cfg.dark_prob));
}

#[test]
fn blind_examples() {
    let cfg = Preset::Paper680k.config();
    assert!(!detector_blind(&cfg, 0.0).unwrap());
    assert!(detector_blind(&cfg, 1e-6).unwrap());
    for preset in Preset::ALL {
        let cfg = preset.config();
        if cfg.r_bias > 0.0 {
            assert!(!detector_blind(&cfg, 1e-2).unwrap(), "{preset}");
        }
    }
    // Recovery is classical and total.
    for preset in [Preset::Paper680k, Preset::Paper330k, Preset::Paper100k] {
        let p = count_probability(&preset.config(), 1e-3).unwrap();
        assert_eq!(p.count_prob, 1.0);
        assert_eq!(p.classical_component, 1.0);
    }
}

/// `k` successes in `n` trials sit within five standard deviations of `p`.
fn within_5_sigma(k: usize, n: usize, p: f64) -> bool {
    let mean = n as f64 * p;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    (k as f64 - mean).abs() <= 5.0 * sigma.max(1.0 / 5.0)
}

#[test]
fn dark_run_matches_dark_probability() {
    let cfg = Preset::Paper680k.config();
    let n = 1_000_000;
    let clicks = simulate_gates(&cfg, |_| GateInput::cw(0.0), n, 7)
        .unwrap()
        .iter()
        .filter(|r| r.clicked)
        .count();
    assert!(within_5_sigma(clicks, n, cfg.dark_prob), "{clicks} dark clicks");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn monte_carlo_converges_to_steady_state(
        r in prop_oneof![Just(0.0), log_uniform(1e3, 1e6)],
        p in log_uniform(1e-14, 1e-2),
        seed in any::<u64>(),
    ) {
        let cfg = detector(r, 2.0);
        let expected = count_probability(&cfg, p).unwrap().count_prob;
        let n = 20_000;
        let clicks = simulate_gates(&cfg, |_| GateInput::cw(p), n, seed)
            .unwrap()
            .iter()
            .filter(|r| r.clicked)
            .count();
        prop_assert!(within_5_sigma(clicks, n, expected), "{clicks}/{n} vs {expected}");
    }
}

#[test]
fn blind_gates_stay_dark_until_triggered() {
    let cfg = Preset::Paper680k.config();
    let quiet = simulate_gates(&cfg, |_| GateInput::cw(1e-6), 5000, 3).unwrap();
    assert!(quiet.iter().all(|r| !r.clicked));

    let trigger = apdsim::attack::design_trigger_pulse(&cfg, 1e-6).unwrap().unwrap();
    let loud = simulate_gates(&cfg, |_| GateInput { cw: 1e-6, pulse: trigger }, 5000, 3).unwrap();
    assert!(loud.iter().all(|r| r.clicked && r.mechanism == Mechanism::Classical));
}

#[test]
fn simulation_is_seed_deterministic() {
    let cfg = Preset::Paper330k.config();
    let timeline = |i: usize| GateInput::with_photons(&cfg, 0.0, (i % 3) as f64 * 0.5);
    let a = simulate_gates(&cfg, timeline, 2000, 11).unwrap();
    let b = simulate_gates(&cfg, timeline, 2000, 11).unwrap();
    assert_eq!(a, b);
}

#[test]
fn sweep_csv_has_the_documented_columns() {
    let curve = sweep_power(&Preset::Paper680k.config(), 1e-9, 1e-8, 2).unwrap();
    let csv = curve.to_csv();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "power_w,count_prob,geiger_component,classical_component,blinded,v_apd_off,i_avg_a"
    );
    assert_eq!(lines.count(), curve.points.len());
    assert_eq!(csv, sweep_power(&Preset::Paper680k.config(), 1e-9, 1e-8, 2).unwrap().to_csv());
}
