use std::fmt::Write as _;

use nodalglue::cauchy_ops::boundary_modes;
use nodalglue::experiments::{discrepancy_sweep, max_principle_sweep, right_inverse_norm_sweep};
use nodalglue::geometry::SampleEnvelope;
use nodalglue::gluing::{
    defect_scaling_sweep, gluing_solve, grid_hausdorff, make_pushforward_oracle, ConvergenceRecord, GridSpec,
    NewtonOptions, NodeModel, PushforwardOracle,
};
use nodalglue::index::{cp2_stratum_report, format_index_report, index_report, NodalConfiguration};
use nodalglue::linearized::{line_bundle_dbar_dims, LineBundlePerturbation};
use nodalglue::{par, C64};
use serde::Serialize;

use crate::config::{Command, ExperimentConfig};
use crate::output::{read_json, Artifacts, CliError};

/// Perturbation size of the line-bundle dimension report.
const LINE_BUNDLE_AMPLITUDE: f64 = 0.05;
const LINE_BUNDLE_RESOLUTION: usize = 6;

pub struct RunOutput {
    pub artifacts: Artifacts,
    pub summary: String,
}

pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput, CliError> {
    cfg.validate()?;
    let mut artifacts = Artifacts::default();
    let summary = match cfg.command {
        Command::Index => index(cfg, &mut artifacts)?,
        Command::Preglue => preglue(cfg, &mut artifacts)?,
        Command::Inverse => inverse(cfg, &mut artifacts)?,
        Command::Solve => solve(cfg, &mut artifacts)?,
        Command::Maxprinciple => maxprinciple(cfg, &mut artifacts)?,
        Command::Strata => strata(cfg, &mut artifacts)?,
    };
    artifacts.json("config.json", cfg)?;
    Ok(RunOutput { artifacts, summary })
}

fn t_list(cfg: &ExperimentConfig) -> Vec<C64> {
    cfg.t.iter().map(|&t| C64::new(t, 0.0)).collect()
}

fn node(cfg: &ExperimentConfig) -> Result<(NodeModel, Option<PushforwardOracle>), CliError> {
    if cfg.amplitude == 0.0 {
        return Ok((NodeModel::linear(), None));
    }
    let oracle = make_pushforward_oracle(cfg.seed, cfg.amplitude)?;
    Ok((NodeModel::from_oracle(&oracle)?, Some(oracle)))
}

fn index(cfg: &ExperimentConfig, artifacts: &mut Artifacts) -> Result<String, CliError> {
    let path = cfg.configuration.as_ref().ok_or_else(|| CliError::Validation("missing configuration".into()))?;
    let config: NodalConfiguration = read_json(path)?;
    let report = index_report(&config)?;
    artifacts.json("index.json", &report)?;
    Ok(format_index_report(&report))
}

fn preglue(cfg: &ExperimentConfig, artifacts: &mut Artifacts) -> Result<String, CliError> {
    let (node, _) = node(cfg)?;
    let sweep = defect_scaling_sweep(&node, cfg.p, &t_list(cfg), cfg.grid_spec())?;
    artifacts.csv("preglue.csv", &sweep.rows)?;
    let mut s = format!("{:<12} {:>14}\n", "|t|", "defect");
    for r in &sweep.rows {
        writeln!(s, "{:<12.3e} {:>14.6e}", r.t_abs, r.defect_norm).unwrap();
    }
    match sweep.slope {
        Some(slope) => writeln!(s, "slope {slope:.5} (monotone: {})", sweep.monotone).unwrap(),
        None => writeln!(s, "slope undefined (monotone: {})", sweep.monotone).unwrap(),
    }
    Ok(s)
}

fn inverse(cfg: &ExperimentConfig, artifacts: &mut Artifacts) -> Result<String, CliError> {
    let (node, _) = node(cfg)?;
    let ts = t_list(cfg);
    let trials = cfg.trials.unwrap_or(20);
    let spec = cfg.grid_spec();
    let norms = right_inverse_norm_sweep(&ts, cfg.p, trials, cfg.seed, spec)?;
    let disc = discrepancy_sweep(&node, &ts, cfg.p, trials, cfg.seed, spec)?;
    let a = LineBundlePerturbation::random(cfg.seed, LINE_BUNDLE_AMPLITUDE);
    let dims = (-2..=3).map(|k| line_bundle_dbar_dims(k, &a, LINE_BUNDLE_RESOLUTION)).collect::<Result<Vec<_>, _>>()?;
    artifacts.csv("operator_norms.csv", &norms)?;
    artifacts.csv("discrepancy.csv", &disc)?;
    artifacts.json("dims.json", &dims)?;
    let mut s = format!("{:<12} {:>12} {:>14}\n", "|t|", "‖P_t‖", "discrepancy");
    for (n, d) in norms.iter().zip(&disc) {
        writeln!(s, "{:<12.3e} {:>12.5} {:>14.6e}", n.t_abs, n.estimate, d.median_discrepancy).unwrap();
    }
    for d in &dims {
        writeln!(s, "O({:>2}): kernel {} coker {} index {}", d.k, d.kernel_dim, d.coker_dim, d.index).unwrap();
    }
    Ok(s)
}

#[derive(Serialize)]
struct SolutionDump {
    t_abs: f64,
    /// Grid Hausdorff distance to the oracle's glued curve.
    #[serde(skip_serializing_if = "Option::is_none")]
    hausdorff: Option<f64>,
    record: ConvergenceRecord,
    solution: SampleEnvelope,
}

fn solve(cfg: &ExperimentConfig, artifacts: &mut Artifacts) -> Result<String, CliError> {
    let (node, oracle) = node(cfg)?;
    let spec = cfg.grid_spec();
    let mut opts = NewtonOptions { p: cfg.p, seed: cfg.seed, ..Default::default() };
    opts.neumann.p = cfg.p;
    let results = par::map(&t_list(cfg), |&t| -> Result<(SolutionDump, _), CliError> {
        let mut opts = opts.clone();
        let exact = match &oracle {
            Some(o) => {
                let curve = o.glued_curve(spec.grid(t, nodalglue::geometry::Chart::Annulus)?)?;
                opts.boundary = Some(boundary_modes(&curve)?);
                Some(curve)
            }
            None => None,
        };
        let sol = gluing_solve(&node, t, spec, &opts)?;
        let hausdorff = exact.map(|e| grid_hausdorff(&sol.solution, &e)).transpose()?;
        let dump =
            SolutionDump { t_abs: t.norm(), hausdorff, record: sol.record, solution: sol.solution.to_envelope() };
        Ok((dump, sol.row))
    });
    let mut dumps = vec![];
    let mut rows = vec![];
    for r in results {
        let (d, row) = r?;
        dumps.push(d);
        rows.push(row);
    }
    artifacts.csv("gluing.csv", &rows)?;
    artifacts.json("solution.json", &dumps)?;
    let mut s = format!("{:<12} {:>14} {:>14} {:>6} {:>12}\n", "|t|", "defect", "‖ξ‖", "steps", "hausdorff");
    for (r, d) in rows.iter().zip(&dumps) {
        let h = d.hausdorff.map_or("-".to_string(), |h| format!("{h:.3e}"));
        writeln!(s, "{:<12.3e} {:>14.6e} {:>14.6e} {:>6} {:>12}", r.t_abs, r.defect_norm, r.xi_norm, r.iterations, h)
            .unwrap();
    }
    Ok(s)
}

fn maxprinciple(cfg: &ExperimentConfig, artifacts: &mut Artifacts) -> Result<String, CliError> {
    let (node, _) = node(cfg)?;
    let trials = cfg.trials.unwrap_or(50);
    let a_sup = cfg.a_sup.unwrap_or(1e-2);
    let spec = match cfg.grid {
        Some(_) => cfg.grid_spec(),
        None => GridSpec::Step { h: 0.1, n_theta: 16 },
    };
    let rows = max_principle_sweep(&node, &t_list(cfg), trials, a_sup, cfg.seed, spec)?;
    artifacts.csv("maxprinciple.csv", &rows)?;
    let worst = |f: fn(&nodalglue::linearized::MaxPrincipleTrial) -> f64| rows.iter().map(f).fold(0.0, f64::max);
    Ok(format!(
        "{} trials, ‖A‖∞ = {a_sup:.1e}\nworst ratio {:.5}\nworst ‖Φ‖∞ {:.5}, ‖Φ⁻¹‖∞ {:.5}\n",
        rows.len(),
        worst(|r| r.ratio),
        worst(|r| r.phi_sup),
        worst(|r| r.phi_inv_sup),
    ))
}

fn strata(cfg: &ExperimentConfig, artifacts: &mut Artifacts) -> Result<String, CliError> {
    let report = cp2_stratum_report(cfg.degree.unwrap_or(3))?;
    artifacts.json("strata.json", &report)?;
    let mut s = format!(
        "degree {}: genus {}, dim_C {}, real fiber {}, real family {}, max fixed points {}\n",
        report.d, report.genus, report.dim_c, report.real_fiber_dim, report.real_total_dim, report.max_fixed_points
    );
    for st in &report.strata {
        writeln!(s, "  {:<24} {}", st.name, st.dim).unwrap();
    }
    Ok(s)
}
