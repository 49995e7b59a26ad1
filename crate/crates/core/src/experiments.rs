//! Randomised sweeps over the gluing parameter: operator-norm estimates for
//! the annulus right inverse, quasi-inverse discrepancies and maximum
//! principle trials.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cauchy_ops::{annulus_right_inverse, estimate_operator_norm, random_smooth, trial_seed};
use crate::error::{GlueError, Result};
use crate::geometry::{l1p_norm_with, lp_norm_with, Chart, FormKind, NormConvention, ZeroOneForm};
use crate::gluing::{preglue_w, GridSpec, NodeModel};
use crate::linearized::{
    linearize_at, max_principle_trial, quasi_inverse_discrepancy, MaxPrincipleTrial, NodalOperator,
};
use crate::numerics::median;
use crate::{par, C64};

/// Angular band and radial degree of the random test forms.
const TRIAL_MODES: i64 = 3;
const TRIAL_DEGREE: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorNormRow {
    pub operator: String,
    pub t_abs: f64,
    pub p: f64,
    pub estimate: f64,
    pub trials: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyRow {
    pub t_abs: f64,
    pub p: f64,
    pub median_discrepancy: f64,
    pub n_trials: usize,
}

fn check_sweep(t_list: &[C64], p: f64, trials: usize) -> Result<()> {
    if t_list.is_empty() {
        return Err(GlueError::Input("empty t-list".into()));
    }
    if trials == 0 {
        return Err(GlueError::Input("need at least one trial".into()));
    }
    if !(p > 1.0 && p.is_finite()) {
        return Err(GlueError::Domain(format!("p = {p} must lie in (1, ∞)")));
    }
    Ok(())
}

/// `max ‖P_t α‖_{L^p_1} / ‖α‖_{L^p}` over random smooth forms, one row per `t`.
pub fn right_inverse_norm_sweep(
    t_list: &[C64],
    p: f64,
    trials: usize,
    seed: u64,
    spec: GridSpec,
) -> Result<Vec<OperatorNormRow>> {
    check_sweep(t_list, p, trials)?;
    par::map(t_list, |&t| {
        let grid = spec.grid(t, Chart::Annulus)?;
        let est = estimate_operator_norm(
            annulus_right_inverse,
            |rng| random_smooth::<FormKind>(grid.clone(), 2, rng, TRIAL_MODES, TRIAL_DEGREE),
            |f| lp_norm_with(f, p, NormConvention::Induced, None),
            |u| l1p_norm_with(u, p, NormConvention::Induced, None),
            p,
            trials,
            seed,
        )?;
        Ok(OperatorNormRow { operator: "P_t".into(), t_abs: t.norm(), p, estimate: est.estimate, trials, seed })
    })
    .into_iter()
    .collect()
}

/// Median of `‖D_t Q_t η − η‖ / ‖η‖` over random smooth `η`, with `D_t`
/// linearized at the pregluing of `node`.
pub fn discrepancy_sweep(
    node: &NodeModel,
    t_list: &[C64],
    p: f64,
    trials: usize,
    seed: u64,
    spec: GridSpec,
) -> Result<Vec<DiscrepancyRow>> {
    check_sweep(t_list, p, trials)?;
    let n = node.dim();
    par::map(t_list, |&t| {
        let grid = spec.grid(t, Chart::Annulus)?;
        let base = NodalOperator::new(std::sync::Arc::new(grid.with_chart(Chart::Nodal)?))?;
        let w = preglue_w(node, grid.clone())?;
        let d_t = linearize_at(&w, node.structure.as_ref())?;
        let mut values = par::map_range(trials, |i| {
            let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(seed, i));
            let eta: ZeroOneForm = random_smooth(grid.clone(), n, &mut rng, TRIAL_MODES, TRIAL_DEGREE);
            quasi_inverse_discrepancy(&eta, &d_t, &base, p)
        })
        .into_iter()
        .collect::<Result<Vec<f64>>>()?;
        Ok(DiscrepancyRow { t_abs: t.norm(), p, median_discrepancy: median(&mut values), n_trials: trials })
    })
    .into_iter()
    .collect()
}

/// `trials` maximum-principle constructions spread round-robin over `t_list`,
/// each at the pregluing of `node` with `‖A‖_∞ = a_sup`.
pub fn max_principle_sweep(
    node: &NodeModel,
    t_list: &[C64],
    trials: usize,
    a_sup: f64,
    seed: u64,
    spec: GridSpec,
) -> Result<Vec<MaxPrincipleTrial>> {
    check_sweep(t_list, 2.0, trials)?;
    let setups = t_list
        .iter()
        .map(|&t| {
            let grid = spec.grid(t, Chart::Annulus)?;
            preglue_w(node, grid)
        })
        .collect::<Result<Vec<_>>>()?;
    par::map_range(trials, |i| {
        max_principle_trial(&setups[i % setups.len()], node.structure.as_ref(), a_sup, trial_seed(seed, i))
    })
    .into_iter()
    .collect()
}
