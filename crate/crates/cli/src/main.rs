use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;
mod manifest;

/// Gated APD blinding simulator.
#[derive(Debug, Parser)]
#[command(name = "apdsim", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct Common {
    /// Detector config: a TOML file or a preset name (paper-680k, paper-330k,
    /// paper-100k, clavis2-like-L0, clavis2-like-2L0, zero-rbias).
    #[arg(long, default_value = "paper-680k")]
    pub config: String,
    /// Primary output file; a manifest is written next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Verify the documented expectations for this run; exit 3 on failure.
    #[arg(long)]
    pub check: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    pub fn on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Count probability vs. CW power.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-12)]
        pmin: f64,
        #[arg(long, default_value_t = 1e-1)]
        pmax: f64,
        #[arg(long, default_value_t = 25)]
        points_per_decade: usize,
    },
    /// Locate the CW blinding window.
    Window {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-12)]
        pmin: f64,
        #[arg(long, default_value_t = 1e-1)]
        pmax: f64,
    },
    /// BB84 session, optionally attacked and monitored.
    Qkd {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100_000)]
        pulses: usize,
        #[arg(long, value_enum, default_value_t = Switch::Off)]
        eve: Switch,
        #[arg(long, value_enum, default_value_t = Switch::Off)]
        monitor: Switch,
        /// Alice's mean photon number.
        #[arg(long, default_value_t = 0.5)]
        mu: f64,
        #[arg(long, default_value_t = 0.0)]
        loss_db: f64,
        /// Eve's CW blinding power at each detector.
        #[arg(long, default_value_t = 1e-6)]
        p_blind: f64,
        /// Eve's trigger power; designed from the model when omitted.
        #[arg(long)]
        p_trigger: Option<f64>,
    },
    /// Heating and counting under strong CW light.
    Thermal {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 17.8e-3)]
        power: f64,
    },
    /// Photocurrent monitor on a legitimate and an attacked gate trace.
    MonitorDemo {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20_000)]
        pulses: usize,
        /// CW blinding power of the attacked trace.
        #[arg(long, default_value_t = 1e-6)]
        p_blind: f64,
    },
    /// Fit device parameters to the published thresholds.
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated free parameters.
        #[arg(long, value_delimiter = ',')]
        free: Option<Vec<String>>,
        #[arg(long, default_value_t = 400)]
        max_evaluations: usize,
    },
}

/// Process exit status: 1 bad input, 2 numeric failure, 3 failed check.
#[derive(Debug)]
pub enum Failure {
    Input(String),
    Numeric(String),
    Check(Vec<String>),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 1,
            Failure::Numeric(_) => 2,
            Failure::Check(_) => 3,
        }
    }
}

impl From<apdsim::SimError> for Failure {
    fn from(e: apdsim::SimError) -> Self {
        if e.is_numeric() {
            Failure::Numeric(e.to_string())
        } else {
            Failure::Input(e.to_string())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Input(m) => eprintln!("error: {m}"),
                Failure::Numeric(m) => eprintln!("numeric failure: {m}"),
                Failure::Check(failed) => {
                    for m in failed {
                        eprintln!("check failed: {m}");
                    }
                }
            }
            ExitCode::from(f.code())
        }
    }
}
