//! `nodalglue` experiment runner.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use config::{Command, ExperimentConfig, GridSize};
use output::{read_json, CliError};

#[derive(Parser, Debug)]
#[command(name = "nodalglue", version, about = "Numerical gluing of pseudoholomorphic curves at a node")]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// Experiment config JSON, or for `index` a nodal configuration JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    p: Option<f64>,
    /// Comma-separated moduli of the gluing parameter, e.g. 1e-2,1e-4.
    #[arg(long, allow_hyphen_values = true)]
    t: Option<String>,
    /// Fixed grid NRxNT instead of the default radial step.
    #[arg(long)]
    grid: Option<GridSize>,
    /// Pushforward-oracle amplitude (0 selects the linear node).
    #[arg(long)]
    amplitude: Option<f64>,
    #[arg(long)]
    trials: Option<usize>,
    /// Sup norm of the random zero-order term (maxprinciple).
    #[arg(long)]
    a_sup: Option<f64>,
    /// Degree in CP² (strata).
    #[arg(long, allow_hyphen_values = true)]
    degree: Option<i64>,
}

fn parse_t(s: &str) -> Result<Vec<f64>, CliError> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<f64>().map_err(|_| CliError::Validation(format!("bad t value '{p}'"))))
        .collect()
}

fn resolve(cli: Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::new(cli.command);
    if let Some(path) = &cli.config {
        let value: serde_json::Value = read_json(path)?;
        if value.get("command").is_some() {
            cfg =
                serde_json::from_value(value).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
            if cfg.command != cli.command {
                return Err(CliError::Validation(format!(
                    "config is for '{}' but '{}' was requested",
                    cfg.command.name(),
                    cli.command.name()
                )));
            }
        } else if cli.command == Command::Index {
            cfg.configuration = Some(path.clone());
        } else {
            return Err(CliError::Validation(format!("{} is not an experiment config", path.display())));
        }
    }
    if let Some(t) = &cli.t {
        cfg.t = parse_t(t)?;
    }
    cfg.out = cli.out.unwrap_or(cfg.out);
    cfg.seed = cli.seed.unwrap_or(cfg.seed);
    cfg.p = cli.p.unwrap_or(cfg.p);
    cfg.grid = cli.grid.or(cfg.grid);
    cfg.amplitude = cli.amplitude.unwrap_or(cfg.amplitude);
    cfg.trials = cli.trials.or(cfg.trials);
    cfg.a_sup = cli.a_sup.or(cfg.a_sup);
    cfg.degree = cli.degree.or(cfg.degree);
    Ok(cfg)
}

fn threads() -> Result<Option<usize>, CliError> {
    match std::env::var("NODALGLUE_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map(Some)
            .map_err(|_| CliError::Validation(format!("NODALGLUE_THREADS = '{v}' is not a thread count"))),
        Err(_) => Ok(None),
    }
}

fn main_inner(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve(cli)?;
    let threads = threads()?;
    let out = nodalglue::par::with_threads(threads, || commands::run(&cfg))?;
    let written = out.artifacts.write_all(&cfg.out)?;
    print!("{}", out.summary);
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let err = CliError::Validation(e.to_string().trim().to_string());
            eprintln!("{}", err.to_json());
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    match main_inner(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
