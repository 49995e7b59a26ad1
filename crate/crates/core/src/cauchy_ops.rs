//! Singular integral operators on the log-polar grids.
//!
//! On a log-polar grid the Cauchy kernel is diagonal in the angular index: an
//! input mode `g_k(r) e^{ikθ}` is sent to the mode `k − 1` with profile
//!
//! ```text
//!   k >= 1:  −2 ∫_r^1      g_k(ρ) (r/ρ)^{k−1} dρ
//!   k <= 0:   2 ∫_{r_in}^r g_k(ρ) (ρ/r)^{1−k} dρ
//! ```
//!
//! Both integrals are accumulated interval by interval with a bounded kernel,
//! so no overflow occurs for large `|k|` or tiny inner radii.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GlueError, Result};
use crate::geometry::{
    dbar, lp_norm_with, mode_limit, AnnulusGrid, Chart, Field, FormDegree, MapSample, NormConvention, Sampled,
    ZeroOneForm,
};
use crate::numerics::{bin_of_mode, C64};
use crate::par;

fn zero() -> C64 {
    C64::new(0.0, 0.0)
}

/// Radial profile of the Cauchy transform of one input mode `k`.
fn cauchy_profile(grid: &AnnulusGrid, g: &[C64], k: i64) -> Vec<C64> {
    let nr = grid.n_r;
    let c = (k - 1) as f64;
    let mut out = vec![zero(); nr];
    // ∫_{s_i}^{s_{i+1}} g(σ) e^{c (anchor − σ)} e^{σ} dσ
    let local = |i: usize, anchor: f64| -> C64 {
        let rule = &grid.intervals[i];
        let mut acc = zero();
        for q in 0..rule.sigma.len() {
            let mut gv = zero();
            for l in 0..rule.width {
                gv += g[rule.start + l] * rule.lagrange[q][l];
            }
            let sg = rule.sigma[q];
            acc += gv * (rule.weight[q] * (c * (anchor - sg) + sg).exp());
        }
        acc
    };
    if k >= 1 {
        let mut acc = zero();
        for i in (0..nr - 1).rev() {
            let hi = grid.s_levels[i + 1] - grid.s_levels[i];
            acc = acc * (-c * hi).exp() + local(i, grid.s_levels[i]);
            out[i] = acc * -2.0;
        }
    } else {
        // on the punctured disk, the tail over |z| < r_min with g frozen
        let mut acc = if grid.chart == Chart::Disk { g[0] * (grid.s_levels[0].exp() / (2 - k) as f64) } else { zero() };
        out[0] = acc * 2.0;
        for i in 0..nr - 1 {
            let hi = grid.s_levels[i + 1] - grid.s_levels[i];
            acc = acc * (c * hi).exp() + local(i, grid.s_levels[i + 1]);
            out[i + 1] = acc * 2.0;
        }
    }
    out
}

/// Cauchy transform of one side given in angular modes; returns modes.
pub(crate) fn disk_cauchy_modes(grid: &AnnulusGrid, modes: &Field) -> Field {
    let (nr, nt) = (grid.n_r, grid.n_theta);
    let limit = mode_limit(nt);
    let jobs: Vec<(usize, i64)> = (0..modes.n)
        .flat_map(|c| (-limit..=limit).map(move |k| (c, k)))
        .filter(|&(_, k)| (k - 1).abs() <= limit)
        .collect();
    let profiles = par::map(&jobs, |&(c, k)| {
        let b = bin_of_mode(k, nt).expect("band");
        let g: Vec<C64> = (0..nr).map(|j| modes.get(c, j, b)).collect();
        cauchy_profile(grid, &g, k)
    });
    let mut out = Field::zeros(modes.n, nr, nt);
    for (&(c, k), prof) in jobs.iter().zip(&profiles) {
        let b = bin_of_mode(k - 1, nt).expect("band");
        for j in 0..nr {
            out.set(c, j, b, prof[j]);
        }
    }
    out
}

/// Modes of the holomorphic extension of `src`'s non-negative inner-circle
/// modes, evaluated on the opposite side through `y = t/x`.
pub(crate) fn hole_transfer(grid: &AnnulusGrid, src: &Field) -> Field {
    let (nr, nt) = (grid.n_r, grid.n_theta);
    let limit = mode_limit(nt);
    let arg_t = grid.t.arg();
    let mut out = Field::zeros(src.n, nr, nt);
    for c in 0..src.n {
        for m in 0..=limit {
            let a = src.get(c, 0, bin_of_mode(m, nt).unwrap());
            if a == zero() {
                continue;
            }
            let phase = C64::from_polar(1.0, m as f64 * arg_t);
            let b = bin_of_mode(-m, nt).unwrap();
            for j in 0..nr {
                let ratio = (grid.r_inner / grid.r_levels[j]).powi(m as i32);
                out.set(c, j, b, a * phase * ratio);
            }
        }
    }
    out
}

fn add_fields(a: &mut Field, b: &Field) {
    a.data.iter_mut().zip(&b.data).for_each(|(u, v)| *u += v);
}

/// The disk Cauchy transform `Pg(x) = −(1/π) ∫_Δ g(z)/(z − x) dσ_z`, applied
/// independently on every side of a `Disk` or `Nodal` grid.
pub fn cauchy_transform(g: &ZeroOneForm) -> Result<MapSample> {
    if g.grid.chart == Chart::Annulus {
        return Err(GlueError::Config("cauchy_transform acts on disks; use annulus_right_inverse on A_t".into()));
    }
    let out: Vec<Field> = g.modes().iter().map(|m| disk_cauchy_modes(&g.grid, m)).collect();
    Ok(MapSample::from_mode_sides(g.grid.clone(), g.n, &out))
}

/// Beurling transform `∂(Pg)`. On mode `k` it returns `g_k + (k−1) F_{k−1}/r`
/// in mode `k − 2`, where `F` is the Cauchy profile.
pub fn beurling_transform(g: &ZeroOneForm) -> Result<ZeroOneForm> {
    if g.grid.chart == Chart::Annulus {
        return Err(GlueError::Config("beurling_transform acts on disks".into()));
    }
    let grid = &g.grid;
    let (nr, nt) = (grid.n_r, grid.n_theta);
    let limit = mode_limit(nt);
    let out: Vec<Field> = g
        .modes()
        .iter()
        .map(|gm| {
            let pm = disk_cauchy_modes(grid, gm);
            let mut out = Field::zeros(g.n, nr, nt);
            for c in 0..g.n {
                for k in -limit..=limit {
                    if (k - 2).abs() > limit {
                        continue;
                    }
                    let bk = bin_of_mode(k, nt).unwrap();
                    let bf = bin_of_mode(k - 1, nt).unwrap();
                    let bo = bin_of_mode(k - 2, nt).unwrap();
                    for j in 0..nr {
                        let v = gm.get(c, j, bk) + pm.get(c, j, bf) * ((k - 1) as f64 / grid.r_levels[j]);
                        out.set(c, j, bo, v);
                    }
                }
            }
            out
        })
        .collect();
    Ok(ZeroOneForm::from_mode_sides(grid.clone(), g.n, &out))
}

/// `‖∂(Pg)‖²_{L²}` over the exterior `|x| > 1`, where `Pg` is the decaying
/// holomorphic function `Σ_{c<0} F_c(1) x^c`.
pub fn beurling_exterior_energy(g: &ZeroOneForm) -> Result<f64> {
    if g.grid.chart == Chart::Annulus {
        return Err(GlueError::Config("beurling_exterior_energy acts on disks".into()));
    }
    let grid = &g.grid;
    let nt = grid.n_theta;
    let limit = mode_limit(nt);
    let mut acc = 0.0;
    for gm in g.modes() {
        let pm = disk_cauchy_modes(grid, &gm);
        for c in 0..g.n {
            for m in -limit..0 {
                let v = pm.get(c, grid.n_r - 1, bin_of_mode(m, nt).unwrap());
                acc += std::f64::consts::PI * (m.unsigned_abs() as f64) * v.norm_sqr();
            }
        }
    }
    Ok(acc)
}

/// Outer-boundary Laurent data that fixes the holomorphic freedom on `A_t`:
/// the modes `m >= 0` of a field on `|x| = 1` and the modes `m >= 1` on
/// `|y| = 1`. Indexed `[component][m]`; `minus[c][0]` is unused.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryModes {
    pub plus: Vec<Vec<C64>>,
    pub minus: Vec<Vec<C64>>,
}

impl BoundaryModes {
    pub fn zeros(n: usize, n_theta: usize) -> Self {
        let m = mode_limit(n_theta) as usize + 1;
        BoundaryModes { plus: vec![vec![zero(); m]; n], minus: vec![vec![zero(); m]; n] }
    }

    pub fn sub(&self, other: &Self) -> Self {
        let d = |a: &Vec<Vec<C64>>, b: &Vec<Vec<C64>>| {
            a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u - v).collect()).collect()
        };
        BoundaryModes { plus: d(&self.plus, &other.plus), minus: d(&self.minus, &other.minus) }
    }

    pub fn max_abs(&self) -> f64 {
        self.plus
            .iter()
            .flatten()
            .chain(self.minus.iter().flat_map(|v| v.iter().skip(1)))
            .map(|v| v.norm())
            .fold(0.0, f64::max)
    }
}

fn require_two_sided(grid: &AnnulusGrid) -> Result<()> {
    if grid.sides() == 2 {
        Ok(())
    } else {
        Err(GlueError::Config("operation needs a two-sided (annulus or nodal) grid".into()))
    }
}

/// Read the boundary Laurent data of a field on a two-sided grid.
pub fn boundary_modes(f: &MapSample) -> Result<BoundaryModes> {
    require_two_sided(&f.grid)?;
    let nt = f.grid.n_theta;
    let outer = f.grid.n_r - 1;
    let modes = f.modes();
    let mut out = BoundaryModes::zeros(f.n, nt);
    let limit = mode_limit(nt);
    for c in 0..f.n {
        for m in 0..=limit {
            let b = bin_of_mode(m, nt).unwrap();
            out.plus[c][m as usize] = modes[0].get(c, outer, b);
            if m >= 1 {
                out.minus[c][m as usize] = modes[1].get(c, outer, b);
            }
        }
    }
    Ok(out)
}

/// The holomorphic function `Σ_{m>=0} a_m x^m + Σ_{j>=1} b_j y^j` on `A_t`
/// (on a nodal grid: `Σ a_m x^m` on branch 0 and `Σ b_j y^j` on branch 1).
pub fn holomorphic_from_boundary(grid: Arc<AnnulusGrid>, data: &BoundaryModes) -> Result<MapSample> {
    require_two_sided(&grid)?;
    let (nr, nt) = (grid.n_r, grid.n_theta);
    let n = data.plus.len();
    let limit = mode_limit(nt);
    let annulus = grid.chart == Chart::Annulus;
    let ta = grid.t.norm();
    let arg_t = grid.t.arg();
    let mut sides = vec![Field::zeros(n, nr, nt), Field::zeros(n, nr, nt)];
    for c in 0..n {
        for m in 0..=limit {
            let a = data.plus[c][m as usize];
            let b = if m >= 1 { data.minus[c][m as usize] } else { zero() };
            let bp = bin_of_mode(m, nt).unwrap();
            let bn = bin_of_mode(-m, nt).unwrap();
            let phase = C64::from_polar(1.0, m as f64 * arg_t);
            for j in 0..nr {
                let r = grid.r_levels[j];
                let grow = r.powi(m as i32);
                let v0 = sides[0].get(c, j, bp) + a * grow;
                sides[0].set(c, j, bp, v0);
                let v1 = sides[1].get(c, j, bp) + b * grow;
                sides[1].set(c, j, bp, v1);
                if annulus {
                    // x^m = t^m y^{-m}, y^m = t^m x^{-m}
                    let decay = (ta / r).powi(m as i32);
                    let w0 = sides[0].get(c, j, bn) + b * phase * decay;
                    sides[0].set(c, j, bn, w0);
                    let w1 = sides[1].get(c, j, bn) + a * phase * decay;
                    sides[1].set(c, j, bn, w1);
                }
            }
        }
    }
    Ok(MapSample::from_mode_sides(grid, n, &sides))
}

/// Add the holomorphic correction that gives `f` the boundary data `target`.
pub fn impose_boundary(f: &MapSample, target: &BoundaryModes) -> Result<MapSample> {
    let current = boundary_modes(f)?;
    let h = holomorphic_from_boundary(f.grid.clone(), &target.sub(&current))?;
    Ok(f.add(&h))
}

/// Right inverse of `∂̄` on `A_t`, uniformly bounded in `t`.
///
/// The form is split along `|x| = |y|`; each half is solved with the disk
/// Cauchy transform in its own coordinate and the two solutions are summed
/// over the whole annulus (each is holomorphic on the other half). The result
/// is normalised to have vanishing boundary Laurent data.
pub fn annulus_right_inverse(alpha: &ZeroOneForm) -> Result<MapSample> {
    if alpha.grid.chart != Chart::Annulus {
        return Err(GlueError::Config("annulus_right_inverse needs t != 0; use cauchy_transform per component".into()));
    }
    let grid = &alpha.grid;
    let modes = alpha.modes();
    let p: Vec<Field> = modes.iter().map(|m| disk_cauchy_modes(grid, m)).collect();
    let mut xi = p.clone();
    add_fields(&mut xi[0], &hole_transfer(grid, &p[1]));
    add_fields(&mut xi[1], &hole_transfer(grid, &p[0]));
    let raw = MapSample::from_mode_sides(grid.clone(), alpha.n, &xi);
    impose_boundary(&raw, &BoundaryModes::zeros(alpha.n, grid.n_theta))
}

/// Right inverse of `∂̄` for whichever chart the form lives on: the annulus
/// inverse on `A_t`, the per-branch disk transform otherwise.
pub fn right_inverse(alpha: &ZeroOneForm) -> Result<MapSample> {
    match alpha.grid.chart {
        Chart::Annulus => annulus_right_inverse(alpha),
        _ => cauchy_transform(alpha),
    }
}

/// Holomorphic part of `f`: the `L²`-orthogonal projection (induced metric)
/// onto Laurent series, fitted per angular mode by least squares over all
/// radii and both halves.
pub fn laurent_projection(f: &MapSample) -> Result<MapSample> {
    let grid = &f.grid;
    let (nr, nt) = (grid.n_r, grid.n_theta);
    let limit = mode_limit(nt);
    let modes = f.modes();
    let weights: Vec<f64> =
        (0..nr).map(|j| grid.radial_weights[j] * grid.metric_at(j, NormConvention::Induced)).collect();
    let mut out: Vec<Field> = (0..modes.len()).map(|_| Field::zeros(f.n, nr, nt)).collect();
    if grid.chart == Chart::Annulus {
        let ta = grid.t.norm();
        let arg_t = grid.t.arg();
        for m in -limit..=limit {
            // basis x^m for m >= 0, y^{-m} for m < 0: on the "own" side it is
            // r^{|m|} in mode ±|m|, on the other side (|t|/r)^{|m|} with a phase.
            let a = m.unsigned_abs() as i32;
            let (own, other) = if m >= 0 { (0, 1) } else { (1, 0) };
            let b_own = bin_of_mode(a as i64, nt).unwrap();
            let b_other = bin_of_mode(-(a as i64), nt).unwrap();
            let phase = C64::from_polar(1.0, a as f64 * arg_t);
            let own_prof: Vec<f64> = grid.r_levels.iter().map(|r| r.powi(a)).collect();
            let other_prof: Vec<C64> = grid.r_levels.iter().map(|r| phase * (ta / r).powi(a)).collect();
            let denom: f64 = (0..nr).map(|j| weights[j] * (own_prof[j].powi(2) + other_prof[j].norm_sqr())).sum();
            for c in 0..f.n {
                let numer: C64 = (0..nr)
                    .map(|j| {
                        modes[own].get(c, j, b_own) * (weights[j] * own_prof[j])
                            + other_prof[j].conj() * modes[other].get(c, j, b_other) * weights[j]
                    })
                    .sum();
                let coef = numer / denom;
                for j in 0..nr {
                    let v = out[own].get(c, j, b_own) + coef * own_prof[j];
                    out[own].set(c, j, b_own, v);
                    let w = out[other].get(c, j, b_other) + coef * other_prof[j];
                    out[other].set(c, j, b_other, w);
                }
            }
        }
    } else {
        for (side, sm) in modes.iter().enumerate() {
            for m in 0..=limit {
                let b = bin_of_mode(m, nt).unwrap();
                let prof: Vec<f64> = grid.r_levels.iter().map(|r| r.powi(m as i32)).collect();
                let denom: f64 = (0..nr).map(|j| weights[j] * prof[j] * prof[j]).sum();
                for c in 0..f.n {
                    let numer: C64 = (0..nr).map(|j| sm.get(c, j, b) * (weights[j] * prof[j])).sum();
                    let coef = numer / denom;
                    for j in 0..nr {
                        out[side].set(c, j, b, coef * prof[j]);
                    }
                }
            }
        }
    }
    Ok(MapSample::from_mode_sides(grid.clone(), f.n, &out))
}

/// `n × n` matrix-valued samples, stored column by column.
#[derive(Debug, Clone)]
pub struct MatrixSample {
    pub n: usize,
    pub cols: Vec<MapSample>,
}

impl MatrixSample {
    pub fn identity(grid: Arc<AnnulusGrid>, n: usize) -> Self {
        let cols = (0..n)
            .map(|j| {
                MapSample::from_fn(grid.clone(), n, |_, _| {
                    (0..n).map(|i| if i == j { C64::new(1.0, 0.0) } else { zero() }).collect()
                })
            })
            .collect();
        MatrixSample { n, cols }
    }

    /// Build from a pointwise matrix function of `(side, coordinate)`.
    pub fn from_fn(grid: Arc<AnnulusGrid>, n: usize, f: impl Fn(usize, C64) -> DMatrix<C64> + Sync) -> Self {
        let mats = MapSample::from_fn(grid, n * n, |side, z| {
            let m = f(side, z);
            (0..n * n).map(|i| m[(i % n, i / n)]).collect()
        });
        let cols = (0..n).map(|j| mats.map_pointwise(n, |_, _, _, v| v[j * n..(j + 1) * n].to_vec())).collect();
        MatrixSample { n, cols }
    }

    pub fn grid(&self) -> &Arc<AnnulusGrid> {
        &self.cols[0].grid
    }

    pub fn at(&self, side: usize, j: usize, k: usize) -> DMatrix<C64> {
        DMatrix::from_fn(self.n, self.n, |r, c| self.cols[c].sides[side].get(r, j, k))
    }

    /// Pointwise product `self · v`.
    pub fn apply<K: FormDegree>(&self, v: &MapSample) -> Sampled<K> {
        v.map_pointwise(self.n, |side, j, k, x| {
            let m = self.at(side, j, k);
            (0..self.n).map(|r| (0..self.n).map(|c| m[(r, c)] * x[c]).sum()).collect()
        })
    }

    pub fn mul(&self, other: &MatrixSample) -> MatrixSample {
        MatrixSample { n: self.n, cols: other.cols.iter().map(|c| self.apply::<crate::geometry::MapKind>(c)).collect() }
    }

    /// Largest pointwise operator norm.
    pub fn sup_norm(&self) -> f64 {
        self.pointwise_max(|m| m.singular_values().max())
    }

    /// Largest pointwise operator norm of the inverse (infinite if singular).
    pub fn sup_inverse_norm(&self) -> f64 {
        self.pointwise_max(|m| {
            let s = m.singular_values().min();
            if s > 0.0 {
                1.0 / s
            } else {
                f64::INFINITY
            }
        })
    }

    fn pointwise_max(&self, f: impl Fn(DMatrix<C64>) -> f64 + Sync) -> f64 {
        let g = self.grid().clone();
        let (nr, nt) = (g.n_r, g.n_theta);
        let sides = g.sides();
        par::map_range(sides * nr * nt, |i| {
            let side = i / (nr * nt);
            let rem = i % (nr * nt);
            f(self.at(side, rem / nt, rem % nt))
        })
        .into_iter()
        .fold(0.0, f64::max)
    }
}

/// Result of [`resolvent_solve`].
#[derive(Debug, Clone)]
pub struct ResolventSolution {
    pub phi: MatrixSample,
    pub iterations: usize,
    /// Largest ratio of successive update norms.
    pub contraction: f64,
    /// `‖Φ − Id − P(AΦ)‖_{L^p}` at exit.
    pub residual: f64,
    /// `‖∂̄Φ − AΦ‖_{L^p}` with the grid derivative (diagnostic).
    pub derivative_residual: f64,
    pub sup_phi: f64,
    pub sup_phi_inv: f64,
}

/// Contraction threshold for the fixed-point map `Φ ↦ Id + P(AΦ)`.
pub const RESOLVENT_CONTRACTION_LIMIT: f64 = 0.5;

/// Solve `∂̄Φ = AΦ` with `Φ = Id + P(AΦ)` by fixed-point iteration, where `P`
/// is the chart's right inverse. Fails with a threshold error reporting the
/// measured contraction factor when the iteration does not contract by at
/// least one half per step, or when `operator_bound · ‖A‖_∞ > 1/2`.
pub fn resolvent_solve(a: &MatrixSample, p: f64, operator_bound: Option<f64>, tol: f64) -> Result<ResolventSolution> {
    let a_sup = a.sup_norm();
    if let Some(bound) = operator_bound {
        if bound * a_sup > RESOLVENT_CONTRACTION_LIMIT {
            return Err(GlueError::Threshold { factor: bound * a_sup, threshold: RESOLVENT_CONTRACTION_LIMIT });
        }
    }
    let grid = a.grid().clone();
    let n = a.n;
    let id = MatrixSample::identity(grid.clone(), n);
    let step = |phi: &MatrixSample| -> Result<MatrixSample> {
        let cols = (0..n)
            .map(|j| {
                let rhs: ZeroOneForm = a.apply(&phi.cols[j]);
                Ok(id.cols[j].add(&right_inverse(&rhs)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MatrixSample { n, cols })
    };
    let diff_norm = |x: &MatrixSample, y: &MatrixSample| -> f64 {
        x.cols.iter().zip(&y.cols).map(|(u, v)| lp_norm_with(&u.sub(v), p, NormConvention::Induced, None)).sum()
    };
    let mut phi = id.clone();
    let mut prev_update = f64::NAN;
    let mut contraction: f64 = 0.0;
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    for it in 1..=200 {
        let next = step(&phi)?;
        let update = diff_norm(&next, &phi);
        if prev_update.is_finite() && prev_update > 1e-13 {
            let ratio = update / prev_update;
            contraction = contraction.max(ratio);
            if it > 3 && ratio > RESOLVENT_CONTRACTION_LIMIT {
                return Err(GlueError::Threshold { factor: ratio, threshold: RESOLVENT_CONTRACTION_LIMIT });
            }
        }
        prev_update = update;
        phi = next;
        iterations = it;
        residual = diff_norm(&step(&phi)?, &phi);
        if residual <= tol {
            break;
        }
    }
    if residual > tol {
        return Err(GlueError::Iteration { iterations, defect: residual });
    }
    let derivative_residual = (0..n)
        .map(|j| {
            let lhs = dbar(&phi.cols[j]);
            let rhs: ZeroOneForm = a.apply(&phi.cols[j]);
            lp_norm_with(&lhs.sub(&rhs), p, NormConvention::Induced, None)
        })
        .sum();
    let sup_phi = phi.sup_norm();
    let sup_phi_inv = phi.sup_inverse_norm();
    Ok(ResolventSolution { phi, iterations, contraction, residual, derivative_residual, sup_phi, sup_phi_inv })
}

/// Randomised lower bound on an operator norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatorNormEstimate {
    pub p: f64,
    pub estimate: f64,
    pub trials: usize,
    pub seed: u64,
}

/// Seed of trial `i` derived from a base seed.
pub fn trial_seed(seed: u64, trial: usize) -> u64 {
    seed ^ (trial as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// `max_i ‖op(f_i)‖ / ‖f_i‖` over `trials` random inputs drawn by `sample`
/// from per-trial seeds; deterministic in `seed`.
pub fn estimate_operator_norm<X, Y>(
    op: impl Fn(&X) -> Result<Y> + Sync,
    sample: impl Fn(&mut ChaCha8Rng) -> X + Sync,
    norm_in: impl Fn(&X) -> f64 + Sync,
    norm_out: impl Fn(&Y) -> f64 + Sync,
    p: f64,
    trials: usize,
    seed: u64,
) -> Result<OperatorNormEstimate>
where
    X: Send,
    Y: Send,
{
    let quotients = par::map_range(trials, |i| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(seed, i));
        let x = sample(&mut rng);
        let nx = norm_in(&x);
        if nx == 0.0 {
            return Ok(0.0);
        }
        Ok(norm_out(&op(&x)?) / nx)
    });
    let mut estimate: f64 = 0.0;
    for q in quotients {
        estimate = estimate.max(q?);
    }
    Ok(OperatorNormEstimate { p, estimate, trials, seed })
}

/// Random smooth field: on every side a sum of angular modes `|m| <= max_mode`
/// with random polynomial radial profiles of degree `<= degree` in the side's
/// radius.
pub fn random_smooth<K: FormDegree>(
    grid: Arc<AnnulusGrid>,
    n: usize,
    rng: &mut ChaCha8Rng,
    max_mode: i64,
    degree: usize,
) -> Sampled<K> {
    let sides = grid.sides();
    let coeffs: Vec<Vec<Vec<Vec<C64>>>> = (0..sides)
        .map(|_| {
            (0..n)
                .map(|_| {
                    (-max_mode..=max_mode)
                        .map(|_| {
                            (0..=degree).map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect()
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    Sampled::<K>::from_fn(grid, n, |side, z| {
        let r = z.norm();
        let th = z.arg();
        (0..n)
            .map(|c| {
                let mut acc = zero();
                for (mi, poly) in coeffs[side][c].iter().enumerate() {
                    let m = mi as i64 - max_mode;
                    let prof: C64 = poly.iter().enumerate().map(|(d, a)| a * r.powi(d as i32)).sum();
                    acc += prof * C64::from_polar(1.0, m as f64 * th);
                }
                acc
            })
            .collect()
    })
}
