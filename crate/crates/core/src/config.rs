//! Detector parameterization, validation, presets and the on-disk TOML format.
//!
//! All quantities are SI: ohm, farad, volt, second, hertz, kelvin, watt,
//! ampere, metre. Fields with a `serde(default)` may be omitted from a
//! config file; everything else is mandatory.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

/// Margin of the lowest usable discrimination level above the capacitive
/// gate transient: `L0 = 1.1 * v_cap_transient`.
pub const DISCRIMINATION_MARGIN: f64 = 1.1;

/// -30 degC, the thermo-electric cooler set point of the reference detector.
pub const T_SETPOINT: f64 = 243.15;

pub const DEFAULT_GATE_AMPLITUDE: f64 = 4.0;
pub const DEFAULT_GATE_WIDTH: f64 = 3.5e-9;
pub const DEFAULT_GATE_RATE: f64 = 2.0e6;
pub const DEFAULT_EXCESS_BIAS: f64 = 2.5;
pub const DEFAULT_WAVELENGTH: f64 = 1.55e-6;
/// Capacitive transient of the Clavis2-like front end.
pub const CLAVIS2_V_CAP: f64 = 35e-3;

fn d_r_sense() -> f64 {
    50.0
}
fn d_c_filter() -> f64 {
    100e-12
}
fn d_c_diode() -> f64 {
    CALIBRATED.c_diode
}
fn d_v_breakdown_ref() -> f64 {
    50.0
}
fn d_beta_vb() -> f64 {
    0.1
}
fn d_gain_cap() -> f64 {
    CALIBRATED.gain_cap
}
fn d_unity_responsivity() -> f64 {
    CALIBRATED.unity_responsivity
}
fn d_pde() -> f64 {
    0.10
}
fn d_dark_prob() -> f64 {
    1e-5
}
fn d_r_diode() -> f64 {
    CALIBRATED.r_diode
}
fn d_dark_current() -> f64 {
    1e-10
}

/// Full electrical, optical and thermal description of one gated APD channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    /// Series biasing resistor between the DC supply and the APD.
    pub r_bias: f64,
    #[serde(default = "d_r_sense")]
    pub r_sense: f64,
    /// Bias-node decoupling capacitance.
    #[serde(default = "d_c_filter")]
    pub c_filter: f64,
    /// Junction plus stray capacitance; sets the charge of one avalanche.
    #[serde(default = "d_c_diode")]
    pub c_diode: f64,
    /// DC bias between gates.
    pub v_dc: f64,
    pub gate_amplitude: f64,
    pub gate_width: f64,
    pub gate_rate: f64,
    #[serde(default = "d_v_breakdown_ref")]
    pub v_breakdown_ref: f64,
    pub t_ref: f64,
    /// dV_b/dT in V/K.
    #[serde(default = "d_beta_vb")]
    pub beta_vb: f64,
    /// Junction-to-sink thermal resistance in K/W.
    pub theta_thermal: f64,
    pub gain_exponent: f64,
    #[serde(default = "d_gain_cap")]
    pub gain_cap: f64,
    /// Photocurrent per optical watt at unity gain (A/W).
    #[serde(default = "d_unity_responsivity")]
    pub unity_responsivity: f64,
    #[serde(default = "d_pde")]
    pub pde: f64,
    #[serde(default = "d_dark_prob")]
    pub dark_prob: f64,
    /// Space-charge / series resistance of the diode. Limits the linear-mode
    /// current at high flux and sets the height of an avalanche pulse at the
    /// sense node, `r_sense * excess / (r_diode + r_sense)`.
    #[serde(default = "d_r_diode")]
    pub r_diode: f64,
    /// Leakage current of the unilluminated diode.
    #[serde(default = "d_dark_current")]
    pub dark_current: f64,
    /// Capacitive charging signal at the sense node (the L0 reference).
    pub v_cap_transient: f64,
    /// Comparator threshold L.
    pub discrimination_level: f64,
    pub wavelength: f64,
    pub t_ambient: f64,
}

/// Values fitted against the published thresholds by `calibrate` and frozen
/// into the defaults and presets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibratedParams {
    pub gain_exponent: f64,
    pub unity_responsivity: f64,
    pub c_diode: f64,
    pub r_diode: f64,
    pub gain_cap: f64,
    /// Capacitive transient of the reference detector's own front end.
    pub v_cap_transient: f64,
    pub theta_thermal: f64,
}

pub const CALIBRATED: CalibratedParams = CalibratedParams {
    gain_exponent: 0.03185,
    unity_responsivity: 0.3402,
    c_diode: 8.870e-11,
    r_diode: 1451.0,
    gain_cap: 32.02,
    v_cap_transient: 5.367e-4,
    theta_thermal: 10.0,
};

/// Discrimination setting relative to the capacitive transient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Discrimination {
    /// Just above the capacitive signal.
    L0,
    /// Twice the lowest usable level.
    #[serde(rename = "2L0")]
    TwoL0,
}

impl Discrimination {
    pub fn multiple(self) -> f64 {
        match self {
            Discrimination::L0 => 1.0,
            Discrimination::TwoL0 => 2.0,
        }
    }
}

/// Lowest discrimination level that rejects the capacitive transient.
pub fn discrimination_floor(cfg: &DetectorConfig) -> f64 {
    DISCRIMINATION_MARGIN * cfg.v_cap_transient
}

impl Default for DetectorConfig {
    /// The reference detector: 3.5 ns / 4 V / 2 MHz gates, 2.5 V excess bias,
    /// -30 degC, 1.55 um, no bias resistor, discriminator at L0.
    fn default() -> Self {
        let v_b = d_v_breakdown_ref();
        let v_cap = REFERENCE_V_CAP;
        DetectorConfig {
            r_bias: 0.0,
            r_sense: d_r_sense(),
            c_filter: d_c_filter(),
            c_diode: d_c_diode(),
            v_dc: v_b + DEFAULT_EXCESS_BIAS - DEFAULT_GATE_AMPLITUDE,
            gate_amplitude: DEFAULT_GATE_AMPLITUDE,
            gate_width: DEFAULT_GATE_WIDTH,
            gate_rate: DEFAULT_GATE_RATE,
            v_breakdown_ref: v_b,
            t_ref: T_SETPOINT,
            beta_vb: d_beta_vb(),
            theta_thermal: CALIBRATED.theta_thermal,
            gain_exponent: CALIBRATED.gain_exponent,
            gain_cap: d_gain_cap(),
            unity_responsivity: d_unity_responsivity(),
            pde: d_pde(),
            dark_prob: d_dark_prob(),
            r_diode: d_r_diode(),
            dark_current: d_dark_current(),
            v_cap_transient: v_cap,
            discrimination_level: DISCRIMINATION_MARGIN * v_cap,
            wavelength: DEFAULT_WAVELENGTH,
            t_ambient: T_SETPOINT,
        }
    }
}

impl DetectorConfig {
    /// Gate peak minus breakdown at the reference temperature with no
    /// resistive drop.
    pub fn nominal_excess(&self) -> f64 {
        self.v_dc + self.gate_amplitude - self.v_breakdown_ref
    }

    pub fn with_r_bias(mut self, r_bias: f64) -> Self {
        self.r_bias = r_bias;
        self
    }

    /// Sets L to a multiple of the discrimination floor.
    pub fn with_discrimination(mut self, d: Discrimination) -> Self {
        self.discrimination_level = d.multiple() * discrimination_floor(&self);
        self
    }

    pub fn with_capacitive_signal(mut self, v_cap: f64, d: Discrimination) -> Self {
        self.v_cap_transient = v_cap;
        self.with_discrimination(d)
    }

    /// Moves the breakdown voltage and the DC bias together so that the
    /// excess bias is preserved.
    pub fn with_breakdown_keeping_excess(mut self, v_b: f64) -> Self {
        let excess = self.nominal_excess();
        self.v_breakdown_ref = v_b;
        self.v_dc = v_b + excess - self.gate_amplitude;
        self
    }

    pub fn validate(&self) -> Result<()> {
        fn finite(name: &'static str, x: f64) -> Result<()> {
            if x.is_finite() {
                Ok(())
            } else {
                Err(SimError::invalid(name, format!("must be finite, got {x}")))
            }
        }
        fn positive(name: &'static str, x: f64) -> Result<()> {
            finite(name, x)?;
            if x > 0.0 {
                Ok(())
            } else {
                Err(SimError::invalid(name, format!("must be > 0, got {x}")))
            }
        }
        fn non_negative(name: &'static str, x: f64) -> Result<()> {
            finite(name, x)?;
            if x >= 0.0 {
                Ok(())
            } else {
                Err(SimError::invalid(name, format!("must be >= 0, got {x}")))
            }
        }
        fn probability(name: &'static str, x: f64) -> Result<()> {
            finite(name, x)?;
            if (0.0..=1.0).contains(&x) {
                Ok(())
            } else {
                Err(SimError::invalid(name, format!("must lie in [0, 1], got {x}")))
            }
        }

        non_negative("r_bias", self.r_bias)?;
        positive("r_sense", self.r_sense)?;
        non_negative("c_filter", self.c_filter)?;
        positive("c_diode", self.c_diode)?;
        positive("v_dc", self.v_dc)?;
        positive("gate_amplitude", self.gate_amplitude)?;
        positive("gate_width", self.gate_width)?;
        positive("gate_rate", self.gate_rate)?;
        positive("v_breakdown_ref", self.v_breakdown_ref)?;
        positive("t_ref", self.t_ref)?;
        finite("beta_vb", self.beta_vb)?;
        non_negative("theta_thermal", self.theta_thermal)?;
        positive("gain_exponent", self.gain_exponent)?;
        positive("unity_responsivity", self.unity_responsivity)?;
        probability("pde", self.pde)?;
        probability("dark_prob", self.dark_prob)?;
        non_negative("r_diode", self.r_diode)?;
        non_negative("dark_current", self.dark_current)?;
        non_negative("v_cap_transient", self.v_cap_transient)?;
        positive("discrimination_level", self.discrimination_level)?;
        positive("wavelength", self.wavelength)?;
        positive("t_ambient", self.t_ambient)?;

        if !(self.gain_cap.is_finite() && self.gain_cap > 1.0) {
            return Err(SimError::invalid(
                "gain_cap",
                format!("must be > 1, got {}", self.gain_cap),
            ));
        }
        if self.gate_width * self.gate_rate >= 1.0 {
            return Err(SimError::invalid(
                "gate_width",
                "gate duty cycle must be below unity",
            ));
        }
        if self.v_dc >= self.v_breakdown_ref {
            return Err(SimError::invalid(
                "v_dc",
                "DC bias must sit below breakdown between gates",
            ));
        }
        if self.v_dc + self.gate_amplitude <= self.v_breakdown_ref {
            return Err(SimError::invalid(
                "gate_amplitude",
                "gate peak must exceed breakdown",
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("DetectorConfig always serializes")
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: DetectorConfig = toml::from_str(s).map_err(|e| SimError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Named configurations shipped with the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Paper680k,
    Paper330k,
    Paper100k,
    Clavis2LikeL0,
    Clavis2Like2L0,
    ZeroRbias,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::Paper680k,
        Preset::Paper330k,
        Preset::Paper100k,
        Preset::Clavis2LikeL0,
        Preset::Clavis2Like2L0,
        Preset::ZeroRbias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Paper680k => "paper-680k",
            Preset::Paper330k => "paper-330k",
            Preset::Paper100k => "paper-100k",
            Preset::Clavis2LikeL0 => "clavis2-like-L0",
            Preset::Clavis2Like2L0 => "clavis2-like-2L0",
            Preset::ZeroRbias => "zero-rbias",
        }
    }

    pub fn from_name(name: &str) -> Option<Preset> {
        Preset::ALL.into_iter().find(|p| p.name() == name)
    }

    pub fn r_bias(self) -> f64 {
        match self {
            Preset::Paper680k => 680e3,
            Preset::Paper330k => 330e3,
            Preset::Paper100k => 100e3,
            Preset::Clavis2LikeL0 | Preset::Clavis2Like2L0 => 1e3,
            Preset::ZeroRbias => 0.0,
        }
    }

    pub fn discrimination(self) -> Discrimination {
        match self {
            Preset::Paper680k | Preset::Paper330k | Preset::Paper100k => Discrimination::TwoL0,
            Preset::Clavis2Like2L0 => Discrimination::TwoL0,
            Preset::Clavis2LikeL0 | Preset::ZeroRbias => Discrimination::L0,
        }
    }

    /// Capacitive transient for the preset's front end.
    pub fn capacitive_signal(self) -> f64 {
        match self {
            Preset::Clavis2LikeL0 | Preset::Clavis2Like2L0 => CLAVIS2_V_CAP,
            _ => REFERENCE_V_CAP,
        }
    }

    /// Builds the preset on top of `base`, overriding only bias resistor,
    /// capacitive signal and discrimination level.
    pub fn apply(self, base: &DetectorConfig) -> DetectorConfig {
        base.clone()
            .with_r_bias(self.r_bias())
            .with_capacitive_signal(self.capacitive_signal(), self.discrimination())
    }

    pub fn config(self) -> DetectorConfig {
        self.apply(&DetectorConfig::default())
    }
}

/// Capacitive transient assumed for the reference detector's own front end.
pub const REFERENCE_V_CAP: f64 = CALIBRATED.v_cap_transient;

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}
