//! BB84 Monte Carlo between Alice and a two-detector Bob, optionally with an
//! intercept-resend Eve who blinds Bob's detectors and steers clicks with
//! bright trigger pulses.
//!
//! Bob chooses his basis passively with a 50/50 splitter; the two detector
//! channels carry bit 0 and bit 1 in whichever basis was selected. A pulse
//! arriving in the wrong basis splits evenly between the two channels.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::AttackScenario;
use crate::config::DetectorConfig;
use crate::detector::{GateInput, GateSimulator, Mechanism};
use crate::error::{Result, SimError};
use crate::sentinel::{scan_current_trace, MonitorConfig, MonitorMode};

/// Conventional BB84 abort threshold.
pub const QBER_ABORT: f64 = 0.11;
pub const EVE_INFO_SUCCESS: f64 = 0.9;
pub const DOUBLE_CLICK_CONSPICUOUS: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    Rectilinear,
    Diagonal,
}

impl Basis {
    fn random<R: Rng>(rng: &mut R) -> Basis {
        if rng.gen::<bool>() {
            Basis::Diagonal
        } else {
            Basis::Rectilinear
        }
    }

    fn swapped(self) -> Basis {
        match self {
            Basis::Rectilinear => Basis::Diagonal,
            Basis::Diagonal => Basis::Rectilinear,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bb84Pulse {
    pub bit: u8,
    pub basis: Basis,
    pub mean_photon_number: f64,
}

/// Alice's source and the channel to Bob.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AliceConfig {
    pub mean_photon_number: f64,
    pub channel_loss_db: f64,
}

impl Default for AliceConfig {
    fn default() -> Self {
        AliceConfig {
            mean_photon_number: 0.5,
            channel_loss_db: 0.0,
        }
    }
}

impl AliceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mean_photon_number >= 0.0 && self.mean_photon_number.is_finite()) {
            return Err(SimError::invalid("mean_photon_number", "must be >= 0"));
        }
        if !(self.channel_loss_db >= 0.0 && self.channel_loss_db.is_finite()) {
            return Err(SimError::invalid("channel_loss_db", "must be >= 0"));
        }
        Ok(())
    }

    /// Mean photon number reaching Bob's splitter.
    pub fn arriving_photons(&self) -> f64 {
        self.mean_photon_number * 10f64.powf(-self.channel_loss_db / 10.0)
    }
}

/// Intercept-resend with faked states: Eve measures in a uniformly random
/// basis and resends CW blinding light plus a trigger pulse aimed at the
/// detector for her bit, in her basis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EveStrategy {
    pub scenario: AttackScenario,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionStats {
    pub pulses_sent: usize,
    pub sifted_length: usize,
    pub qber: f64,
    /// Fraction of Bob's sifted bits equal to Eve's record; 0 without Eve.
    pub eve_information: f64,
    pub double_click_rate: f64,
    /// Fraction of pulses on which Bob registered at least one click.
    pub always_click_rate: f64,
    pub alarms: usize,
    pub eve_present: bool,
    pub monitor_attached: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    AttackSuccessful,
    AttackDetected,
    DetectorSafe,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::AttackSuccessful => "attack_successful",
            Verdict::AttackDetected => "attack_detected",
            Verdict::DetectorSafe => "detector_safe",
        })
    }
}

/// Detection takes precedence: an attack that trips the monitor, raises the
/// QBER past the abort threshold, or double-clicks conspicuously has been
/// noticed, whatever Eve learned.
pub fn summarize_session(stats: &SessionStats) -> Verdict {
    if stats.alarms > 0
        || stats.qber >= QBER_ABORT
        || stats.double_click_rate >= DOUBLE_CLICK_CONSPICUOUS
    {
        Verdict::AttackDetected
    } else if stats.qber < QBER_ABORT && stats.eve_information > EVE_INFO_SUCCESS {
        Verdict::AttackSuccessful
    } else {
        Verdict::DetectorSafe
    }
}

pub const SESSION_CSV_HEADER: &str =
    "pulses,sifted,qber,eve_info,double_click_rate,always_click_rate,alarms,verdict";

impl SessionStats {
    pub fn verdict(&self) -> Verdict {
        summarize_session(self)
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{:.9},{:.9},{:.9},{:.9},{},{}",
            self.pulses_sent,
            self.sifted_length,
            self.qber,
            self.eve_information,
            self.double_click_rate,
            self.always_click_rate,
            self.alarms,
            self.verdict()
        )
    }

    pub fn to_text(&self) -> String {
        format!(
            "pulses_sent: {}\nsifted_length: {}\nqber: {:.9}\neve_present: {}\neve_information: {:.9}\ndouble_click_rate: {:.9}\nalways_click_rate: {:.9}\nmonitor_attached: {}\nalarms: {}\nverdict: {}\n",
            self.pulses_sent,
            self.sifted_length,
            self.qber,
            self.eve_present,
            self.eve_information,
            self.double_click_rate,
            self.always_click_rate,
            self.monitor_attached,
            self.alarms,
            self.verdict()
        )
    }
}

/// Independent stream per consumer, all derived from the session seed.
fn sub_seed(seed: u64, stream: u64) -> u64 {
    seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Runs one BB84 session over `n_pulses` gates. Deterministic for a fixed
/// seed. Double clicks are discarded from the key but counted.
pub fn run_bb84(
    alice: &AliceConfig,
    bob: [&DetectorConfig; 2],
    n_pulses: usize,
    eve: Option<&EveStrategy>,
    monitor: Option<&MonitorConfig>,
    seed: u64,
) -> Result<SessionStats> {
    run_session(alice, bob, n_pulses, eve, monitor, seed, false)
}

/// Same session with the two basis labels exchanged everywhere. Only useful
/// for checking that nothing in the harness singles out a basis.
#[doc(hidden)]
pub fn run_bb84_bases_swapped(
    alice: &AliceConfig,
    bob: [&DetectorConfig; 2],
    n_pulses: usize,
    eve: Option<&EveStrategy>,
    monitor: Option<&MonitorConfig>,
    seed: u64,
) -> Result<SessionStats> {
    run_session(alice, bob, n_pulses, eve, monitor, seed, true)
}

fn run_session(
    alice: &AliceConfig,
    bob: [&DetectorConfig; 2],
    n_pulses: usize,
    eve: Option<&EveStrategy>,
    monitor: Option<&MonitorConfig>,
    seed: u64,
    swap_bases: bool,
) -> Result<SessionStats> {
    if n_pulses < 1 {
        return Err(SimError::invalid("n_pulses", "must be >= 1"));
    }
    alice.validate()?;
    for cfg in bob {
        cfg.validate()?;
    }
    if let Some(e) = eve {
        for cfg in bob {
            e.scenario.validate(cfg)?;
        }
    }
    if let Some(m) = monitor {
        m.validate()?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 0));
    let mut eve_rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 1));
    let mut det = [
        GateSimulator::new(bob[0].clone(), sub_seed(seed, 2))?,
        GateSimulator::new(bob[1].clone(), sub_seed(seed, 3))?,
    ];
    let mut traces: [Vec<(usize, f64)>; 2] = match monitor {
        Some(_) => [Vec::with_capacity(n_pulses), Vec::with_capacity(n_pulses)],
        None => [Vec::new(), Vec::new()],
    };
    let relabel = |b: Basis| if swap_bases { b.swapped() } else { b };
    let mu_bob = alice.arriving_photons();

    let (mut sifted, mut errors, mut eve_matches) = (0usize, 0usize, 0usize);
    let (mut doubles, mut any_click) = (0usize, 0usize);

    for i in 0..n_pulses {
        let pulse = Bb84Pulse {
            bit: rng.gen_range(0..2),
            basis: relabel(Basis::random(&mut rng)),
            mean_photon_number: alice.mean_photon_number,
        };
        let bob_basis = relabel(Basis::random(&mut rng));

        let (inputs, eve_bit) = match eve {
            None => {
                let cfg = det[0].config();
                let inputs = if bob_basis == pulse.basis {
                    let mut v = [GateInput::cw(0.0); 2];
                    v[pulse.bit as usize] = GateInput::with_photons(cfg, 0.0, mu_bob);
                    v
                } else {
                    [
                        GateInput::with_photons(cfg, 0.0, mu_bob / 2.0),
                        GateInput::with_photons(det[1].config(), 0.0, mu_bob / 2.0),
                    ]
                };
                (inputs, None)
            }
            Some(e) => {
                let eve_basis = relabel(Basis::random(&mut eve_rng));
                let guess: u8 = eve_rng.gen_range(0..2);
                let eve_bit = if eve_basis == pulse.basis { pulse.bit } else { guess };
                let s = &e.scenario;
                let mut inputs = [GateInput::cw(s.p_blind); 2];
                if bob_basis == eve_basis {
                    inputs[eve_bit as usize].pulse = s.p_trigger;
                } else {
                    inputs[0].pulse = s.p_trigger / 2.0;
                    inputs[1].pulse = s.p_trigger / 2.0;
                }
                (inputs, Some(eve_bit))
            }
        };

        let mut clicks = [false; 2];
        for (k, sim) in det.iter_mut().enumerate() {
            let rec = sim.step(inputs[k]).map_err(|e| SimError::AtPulse {
                index: i,
                source: Box::new(e),
            })?;
            clicks[k] = rec.clicked;
            debug_assert!(rec.clicked == (rec.mechanism != Mechanism::None));
            if let Some(m) = monitor {
                let sample = match m.mode {
                    MonitorMode::InterGate => rec.i_inter_gate,
                    MonitorMode::FullAverage => rec.i_avg,
                };
                traces[k].push((i, sample));
            }
        }

        match clicks {
            [true, true] => {
                doubles += 1;
                any_click += 1;
            }
            [false, false] => {}
            [c0, _] => {
                any_click += 1;
                if bob_basis == pulse.basis {
                    let bob_bit = if c0 { 0 } else { 1 };
                    sifted += 1;
                    if bob_bit != pulse.bit {
                        errors += 1;
                    }
                    if eve_bit == Some(bob_bit) {
                        eve_matches += 1;
                    }
                }
            }
        }
    }

    let alarms = match monitor {
        Some(m) => {
            let mut n = 0;
            for t in &traces {
                n += scan_current_trace(t, m)?.len();
            }
            n
        }
        None => 0,
    };
    let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(SessionStats {
        pulses_sent: n_pulses,
        sifted_length: sifted,
        qber: frac(errors, sifted),
        eve_information: if eve.is_some() { frac(eve_matches, sifted) } else { 0.0 },
        double_click_rate: frac(doubles, n_pulses),
        always_click_rate: frac(any_click, n_pulses),
        alarms,
        eve_present: eve.is_some(),
        monitor_attached: monitor.is_some(),
    })
}
