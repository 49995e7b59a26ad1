use std::path::PathBuf;

use nodalglue::gluing::GridSpec;
use serde::{Deserialize, Serialize};

use crate::output::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Index,
    Preglue,
    Inverse,
    Solve,
    Maxprinciple,
    Strata,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Index => "index",
            Command::Preglue => "preglue",
            Command::Inverse => "inverse",
            Command::Solve => "solve",
            Command::Maxprinciple => "maxprinciple",
            Command::Strata => "strata",
        }
    }

    fn needs_t(self) -> bool {
        !matches!(self, Command::Index | Command::Strata)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSize {
    pub n_r: usize,
    pub n_theta: usize,
}

impl std::str::FromStr for GridSize {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (a, b) = s.split_once(['x', 'X']).ok_or_else(|| format!("grid '{s}' is not of the form NRxNT"))?;
        let n_r = a.trim().parse().map_err(|_| format!("bad radial count in '{s}'"))?;
        let n_theta = b.trim().parse().map_err(|_| format!("bad angular count in '{s}'"))?;
        Ok(GridSize { n_r, n_theta })
    }
}

fn default_p() -> f64 {
    4.0
}

fn default_out() -> PathBuf {
    PathBuf::from("nodalglue-out")
}

/// A fully resolved run; the runner writes it back as `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub command: Command,
    /// Moduli `|t|` of the gluing parameters.
    #[serde(default)]
    pub t: Vec<f64>,
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSize>,
    #[serde(default)]
    pub seed: u64,
    /// Pushforward-oracle amplitude; zero selects the linear node.
    #[serde(default)]
    pub amplitude: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trials: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_sup: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degree: Option<i64>,
    /// Nodal configuration JSON for `index`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub configuration: Option<PathBuf>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

impl ExperimentConfig {
    pub fn new(command: Command) -> Self {
        ExperimentConfig {
            command,
            t: vec![],
            p: default_p(),
            grid: None,
            seed: 0,
            amplitude: 0.0,
            trials: None,
            a_sup: None,
            degree: None,
            configuration: None,
            out: default_out(),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Validation(m));
        if self.command.needs_t() && self.t.is_empty() {
            return bad(format!("{} needs a non-empty t-list (--t)", self.command.name()));
        }
        if let Some(t) = self.t.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            return bad(format!("|t| = {t} must lie in (0, 1)"));
        }
        if !(self.p > 1.0 && self.p.is_finite()) {
            return bad(format!("p = {} must be a finite number above 1", self.p));
        }
        if !(0.0..=0.1).contains(&self.amplitude) {
            return bad(format!("amplitude {} must lie in [0, 0.1]", self.amplitude));
        }
        if let Some(g) = self.grid {
            if g.n_r < 8 || g.n_theta < 8 || !g.n_theta.is_power_of_two() {
                return bad(format!("grid {}x{} needs n_r >= 8 and a power-of-two n_theta >= 8", g.n_r, g.n_theta));
            }
        }
        if self.trials == Some(0) {
            return bad("trials must be positive".into());
        }
        if self.command == Command::Index && self.configuration.is_none() {
            return bad("index needs a nodal configuration (--config)".into());
        }
        Ok(())
    }

    pub fn grid_spec(&self) -> GridSpec {
        match self.grid {
            Some(g) => GridSpec::Fixed { n_r: g.n_r, n_theta: g.n_theta },
            None if self.command == Command::Solve => GridSpec::Step { h: 0.025, n_theta: 32 },
            None => GridSpec::Step { h: 0.05, n_theta: 16 },
        }
    }
}
