//! Pregluing of the node model into `{xy = t}`, the Newton solve of the
//! perturbed Cauchy–Riemann equation on `A_t`, and an exactly solvable
//! pushforward structure to test it against.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cauchy_ops::{boundary_modes, estimate_operator_norm, impose_boundary, random_smooth, BoundaryModes};
use crate::error::{GlueError, Result};
use crate::geometry::{
    l1p_norm_with, lp_norm_with, AnnulusGrid, Chart, CutoffProfile, FormKind, MapSample, Mask, NormConvention,
    ZeroOneForm,
};
use crate::linearized::{
    band_limit, dbar_perturbed, krylov_right_inverse, linearize_at, ACStructure, NeumannOptions, NodalOperator,
    NodalSection, StandardStructure,
};
use crate::numerics::{fit_slope, C64};
use crate::par;

fn zero() -> C64 {
    C64::new(0.0, 0.0)
}

/// Value and Wirtinger derivatives of a branch map at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchJet {
    pub value: Vec<C64>,
    pub dz: Vec<C64>,
    pub dzbar: Vec<C64>,
}

pub type BranchMap = Arc<dyn Fn(C64) -> BranchJet + Send + Sync>;

/// Local model of a nodal curve at one node: the two branches through the
/// node and the ambient structure.
#[derive(Clone)]
pub struct NodeModel {
    pub f_plus: BranchMap,
    pub f_minus: BranchMap,
    pub node: Vec<C64>,
    pub structure: Arc<dyn ACStructure>,
    /// Exponent `a` of the cutoff radius `|t|^a`.
    pub cutoff_exponent: f64,
}

impl std::fmt::Debug for NodeModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NodeModel")
            .field("node", &self.node)
            .field("dim", &self.structure.dim())
            .field("cutoff_exponent", &self.cutoff_exponent)
            .finish()
    }
}

fn apply_q(q: &DMatrix<C64>, v: &[C64]) -> Vec<C64> {
    (0..q.nrows()).map(|r| (0..q.ncols()).map(|c| q[(r, c)] * v[c].conj()).sum()).collect()
}

fn max_dist(a: &[C64], b: &[C64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

impl NodeModel {
    /// Checks that both branches pass through `node`, are holomorphic for the
    /// structure, and meet with distinct tangents.
    pub fn new(f_plus: BranchMap, f_minus: BranchMap, node: Vec<C64>, structure: Arc<dyn ACStructure>) -> Result<Self> {
        let n = structure.dim();
        if n < 2 || node.len() != n {
            return Err(GlueError::Input(format!(
                "node model needs a point of C^n with n >= 2, got {} for C^{n}",
                node.len()
            )));
        }
        let (jp, jm) = (f_plus(zero()), f_minus(zero()));
        for jet in [&jp, &jm] {
            if jet.value.len() != n || jet.dz.len() != n || jet.dzbar.len() != n {
                return Err(GlueError::Shape("branch map has the wrong number of components".into()));
            }
        }
        if max_dist(&jp.value, &node) > 1e-12 || max_dist(&jm.value, &node) > 1e-12 {
            return Err(GlueError::Input("both branches must pass through the node".into()));
        }
        let dot: C64 = jp.dz.iter().zip(&jm.dz).map(|(a, b)| a.conj() * b).sum();
        let na: f64 = jp.dz.iter().map(|v| v.norm_sqr()).sum();
        let nb: f64 = jm.dz.iter().map(|v| v.norm_sqr()).sum();
        if na * nb - dot.norm_sqr() <= 1e-12 * na * nb || na == 0.0 || nb == 0.0 {
            return Err(GlueError::Input("the branches must have distinct tangent lines at the node".into()));
        }
        for f in [&f_plus, &f_minus] {
            for k in 0..8 {
                let z = C64::from_polar(0.5, k as f64 * std::f64::consts::FRAC_PI_4);
                let jet = f(z);
                let qv = apply_q(&structure.q_matrix(&jet.value), &jet.dz);
                let err = jet.dzbar.iter().zip(&qv).map(|(a, b)| (a + b).norm()).fold(0.0, f64::max);
                if err > 1e-8 {
                    return Err(GlueError::Input(format!(
                        "branch is not holomorphic for the structure (defect {err:.2e})"
                    )));
                }
            }
        }
        Ok(NodeModel { f_plus, f_minus, node, structure, cutoff_exponent: 0.25 })
    }

    /// `f₊(x) = (x, 0)`, `f₋(y) = (0, y)` in `C²` with the standard structure.
    pub fn linear() -> Self {
        let branch = |slot: usize| -> BranchMap {
            Arc::new(move |z: C64| {
                let mut value = vec![zero(); 2];
                let mut dz = vec![zero(); 2];
                value[slot] = z;
                dz[slot] = C64::new(1.0, 0.0);
                BranchJet { value, dz, dzbar: vec![zero(); 2] }
            })
        };
        NodeModel::new(branch(0), branch(1), vec![zero(); 2], Arc::new(StandardStructure { n: 2 }))
            .expect("linear node model is valid")
    }

    /// The coordinate axes pushed forward by the oracle diffeomorphism.
    pub fn from_oracle(oracle: &PushforwardOracle) -> Result<Self> {
        let o = Arc::new(oracle.clone());
        let branch = |slot: usize| -> BranchMap {
            let o = o.clone();
            Arc::new(move |z: C64| {
                let mut p = [zero(); 2];
                p[slot] = z;
                let (jz, jzb) = o.jacobian(&p);
                BranchJet {
                    value: o.psi(&p).to_vec(),
                    dz: (0..2).map(|r| jz[(r, slot)]).collect(),
                    dzbar: (0..2).map(|r| jzb[(r, slot)]).collect(),
                }
            })
        };
        let node = o.psi(&[zero(), zero()]).to_vec();
        NodeModel::new(branch(0), branch(1), node, o)
    }

    pub fn with_cutoff_exponent(mut self, exponent: f64) -> Result<Self> {
        if !(exponent > 0.0 && exponent < 0.5) {
            return Err(GlueError::Domain(format!("cutoff exponent {exponent} must lie in (0, 1/2)")));
        }
        self.cutoff_exponent = exponent;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.structure.dim()
    }

    fn branch(&self, side: usize) -> &BranchMap {
        if side == 0 {
            &self.f_plus
        } else {
            &self.f_minus
        }
    }

    fn cutoff_radius(&self, t: C64) -> f64 {
        t.norm().powf(self.cutoff_exponent)
    }
}

/// `φ(z) = ρ(r/τ)·z` with `∂φ` (real) and `∂̄φ`; the identity when `τ = 0`.
fn cutoff_map(z: C64, tau: f64) -> (C64, f64, C64) {
    if tau == 0.0 {
        return (z, 1.0, zero());
    }
    let r = z.norm();
    let u = r / tau;
    let rho = CutoffProfile.rho(u);
    let rp = CutoffProfile.rho_prime(u);
    let dbar_phi = if r > 0.0 { z * z * (rp / (2.0 * r * tau)) } else { zero() };
    (z * rho, rho + rp * r / (2.0 * tau), dbar_phi)
}

fn preglue_value(node: &NodeModel, side: usize, z: C64, tau: f64) -> Vec<C64> {
    let (phi, _, _) = cutoff_map(z, tau);
    if phi.norm() == 0.0 {
        return node.node.clone();
    }
    node.branch(side)(phi).value
}

fn check_t(t: C64) -> Result<()> {
    if !(t.norm() < 1.0) {
        return Err(GlueError::Domain(format!("|t| = {} must be < 1", t.norm())));
    }
    Ok(())
}

/// `w_t`: `f₊(ρ(|t|^{-1/4}|x|)·x)` on `{|x| >= |y|}` and
/// `f₋(ρ(|t|^{-1/4}|y|)·y)` on the other half.
pub fn preglue_w(node: &NodeModel, grid: Arc<AnnulusGrid>) -> Result<MapSample> {
    check_t(grid.t)?;
    if grid.chart != Chart::Annulus {
        return Err(GlueError::Config("w_t lives on an annulus grid".into()));
    }
    let tau = node.cutoff_radius(grid.t);
    Ok(MapSample::from_fn(grid, node.dim(), |side, z| preglue_value(node, side, z, tau)))
}

/// `u_t = f₀ ∘ ρ̂_t` on the branches of the nodal model, sampled on a nodal
/// grid. `t = 0` gives `f₀`.
pub fn preglue_u(node: &NodeModel, t: C64, grid: Arc<AnnulusGrid>) -> Result<NodalSection> {
    check_t(t)?;
    if grid.chart != Chart::Nodal {
        return Err(GlueError::Config("u_t lives on a nodal grid".into()));
    }
    let tau = node.cutoff_radius(t);
    let branches = MapSample::from_fn(grid, node.dim(), |side, z| preglue_value(node, side, z, tau));
    Ok(NodalSection { branches, node: node.node.clone() })
}

/// The nodal map `f₀` itself on a nodal grid.
pub fn nodal_map(node: &NodeModel, grid: Arc<AnnulusGrid>) -> Result<NodalSection> {
    preglue_u(node, zero(), grid)
}

/// `∂̄w_t + q(w_t)·∂w_t`, evaluated from the chain rule at every sample.
pub fn preglue_defect(node: &NodeModel, grid: Arc<AnnulusGrid>) -> Result<ZeroOneForm> {
    check_t(grid.t)?;
    if grid.chart != Chart::Annulus {
        return Err(GlueError::Config("w_t lives on an annulus grid".into()));
    }
    let tau = node.cutoff_radius(grid.t);
    let q = node.structure.clone();
    Ok(ZeroOneForm::from_fn(grid, node.dim(), |side, z| {
        let (phi, del_phi, dbar_phi) = cutoff_map(z, tau);
        if phi.norm() == 0.0 && dbar_phi.norm() == 0.0 {
            return vec![zero(); node.dim()];
        }
        let jet = node.branch(side)(phi);
        let dbar_w: Vec<C64> = jet.dz.iter().zip(&jet.dzbar).map(|(a, b)| a * dbar_phi + b * del_phi).collect();
        let del_w: Vec<C64> = jet.dz.iter().zip(&jet.dzbar).map(|(a, b)| a * del_phi + b * dbar_phi.conj()).collect();
        let qv = apply_q(&q.q_matrix(&jet.value), &del_w);
        dbar_w.iter().zip(&qv).map(|(a, b)| a + b).collect()
    }))
}

/// How to sample `A_t` for each gluing parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GridSpec {
    /// Radial step in `ln r` at most `h`.
    Step { h: f64, n_theta: usize },
    /// Fixed sample counts.
    Fixed { n_r: usize, n_theta: usize },
}

impl GridSpec {
    pub fn grid(&self, t: C64, chart: Chart) -> Result<Arc<AnnulusGrid>> {
        check_t(t)?;
        let g = match *self {
            GridSpec::Step { h, n_theta } => AnnulusGrid::for_step(t, chart, h, n_theta)?,
            GridSpec::Fixed { n_r, n_theta } => {
                AnnulusGrid::new(t, chart, n_r, n_theta, crate::geometry::DEFAULT_R_MIN)?
            }
        };
        Ok(Arc::new(g))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefectRow {
    pub t_abs: f64,
    pub p: f64,
    pub defect_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectSweep {
    /// Sorted by decreasing `|t|`.
    pub rows: Vec<DefectRow>,
    pub monotone: bool,
    /// Least-squares slope of `ln(defect)` against `ln|t|`; absent when the
    /// table is not monotone.
    pub slope: Option<f64>,
}

fn check_p(p: f64) -> Result<()> {
    if p > 2.0 && p.is_finite() {
        Ok(())
    } else {
        Err(GlueError::Domain(format!("p = {p} must lie in (2, ∞)")))
    }
}

fn check_decades(t_list: &[C64]) -> Result<()> {
    let abs: Vec<f64> = t_list.iter().map(|t| t.norm()).collect();
    if abs.iter().any(|&a| a == 0.0 || !(a < 1.0)) {
        return Err(GlueError::Domain("every t must satisfy 0 < |t| < 1".into()));
    }
    let hi = abs.iter().cloned().fold(0.0, f64::max);
    let lo = abs.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(hi / lo >= 1e3 * (1.0 - 1e-9)) {
        return Err(GlueError::Input("t values must span at least three decades".into()));
    }
    Ok(())
}

/// `‖∂̄w_t + q(w_t)∂w_t‖_{L^p}` over `t_list` and its log-log slope.
pub fn defect_scaling_sweep(node: &NodeModel, p: f64, t_list: &[C64], spec: GridSpec) -> Result<DefectSweep> {
    check_p(p)?;
    check_decades(t_list)?;
    let mut ts = t_list.to_vec();
    ts.sort_by(|a, b| b.norm().total_cmp(&a.norm()));
    let rows = par::map(&ts, |&t| -> Result<DefectRow> {
        let grid = spec.grid(t, Chart::Annulus)?;
        let d = preglue_defect(node, grid)?;
        Ok(DefectRow { t_abs: t.norm(), p, defect_norm: lp_norm_with(&d, p, NormConvention::Induced, None) })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let monotone =
        rows.windows(2).all(|w| w[1].defect_norm < w[0].defect_norm) && rows.iter().all(|r| r.defect_norm > 0.0);
    let slope = monotone.then(|| {
        let xs: Vec<f64> = rows.iter().map(|r| r.t_abs.ln()).collect();
        let ys: Vec<f64> = rows.iter().map(|r| r.defect_norm.ln()).collect();
        fit_slope(&xs, &ys)
    });
    Ok(DefectSweep { rows, monotone, slope })
}

/// The polynomial diffeomorphism `Ψ = Id + a·P(z, z̄)` of `C²` and the
/// structure `q_Ψ` it carries the standard one to. `Ψ`-images of holomorphic
/// curves solve `∂̄w + q_Ψ(w)·∂w = 0`.
#[derive(Debug, Clone)]
pub struct PushforwardOracle {
    pub amplitude: f64,
    pub seed: u64,
    /// Coefficients of [`MONOMIALS`] per component.
    coeffs: [[C64; 7]; 2],
    c1: f64,
}

/// Degree-two monomials with at least one conjugate factor, as exponents of
/// `(z₁, z₂, z̄₁, z̄₂)`. None of them contributes to `Ψ` or `dΨ` at the origin.
const MONOMIALS: [[u32; 4]; 7] =
    [[0, 0, 2, 0], [0, 0, 0, 2], [0, 0, 1, 1], [1, 0, 0, 1], [0, 1, 1, 0], [1, 0, 1, 0], [0, 1, 0, 1]];

/// Radius of the polydisk on which the oracle is checked.
const ORACLE_CHART: f64 = 1.0;

fn monomial(e: &[u32; 4], v: &[C64; 4]) -> C64 {
    (0..4).fold(C64::new(1.0, 0.0), |acc, i| acc * v[i].powu(e[i]))
}

fn monomial_derivative(e: &[u32; 4], v: &[C64; 4], i: usize) -> C64 {
    if e[i] == 0 {
        return zero();
    }
    let mut d = *e;
    d[i] -= 1;
    monomial(&d, v) * e[i] as f64
}

impl PushforwardOracle {
    fn vars(z: &[C64]) -> [C64; 4] {
        [z[0], z[1], z[0].conj(), z[1].conj()]
    }

    pub fn psi(&self, z: &[C64]) -> [C64; 2] {
        let v = Self::vars(z);
        let mut out = [z[0], z[1]];
        for (c, o) in out.iter_mut().enumerate() {
            for (e, a) in MONOMIALS.iter().zip(&self.coeffs[c]) {
                *o += a * monomial(e, &v) * self.amplitude;
            }
        }
        out
    }

    /// `(∂Ψ/∂z, ∂Ψ/∂z̄)` as `2 × 2` matrices.
    pub fn jacobian(&self, z: &[C64]) -> (DMatrix<C64>, DMatrix<C64>) {
        let v = Self::vars(z);
        let mut jz = DMatrix::<C64>::identity(2, 2);
        let mut jzb = DMatrix::<C64>::zeros(2, 2);
        for c in 0..2 {
            for (e, a) in MONOMIALS.iter().zip(&self.coeffs[c]) {
                for j in 0..2 {
                    jz[(c, j)] += a * monomial_derivative(e, &v, j) * self.amplitude;
                    jzb[(c, j)] += a * monomial_derivative(e, &v, j + 2) * self.amplitude;
                }
            }
        }
        (jz, jzb)
    }

    /// `Ψ⁻¹(w)` by the fixed-point iteration `z = w − a·P(z)`.
    pub fn inverse(&self, w: &[C64]) -> Result<[C64; 2]> {
        let mut z = [w[0], w[1]];
        for _ in 0..200 {
            let f = self.psi(&z);
            let next = [z[0] - (f[0] - w[0]), z[1] - (f[1] - w[1])];
            let step = (next[0] - z[0]).norm().max((next[1] - z[1]).norm());
            z = next;
            if step <= 1e-16 * (1.0 + w[0].norm() + w[1].norm()) {
                return Ok(z);
            }
        }
        let f = self.psi(&z);
        if (f[0] - w[0]).norm().max((f[1] - w[1]).norm()) < 1e-13 {
            return Ok(z);
        }
        Err(GlueError::Singular("Ψ is not invertible at this point".into()))
    }

    /// `Q = −Ψ_z̄ · conj(Ψ_z)⁻¹` at `z`.
    fn q_at_preimage(&self, z: &[C64]) -> DMatrix<C64> {
        let (jz, jzb) = self.jacobian(z);
        let inv = jz.map(|v| v.conj()).try_inverse().unwrap_or_else(|| DMatrix::zeros(2, 2));
        -(jzb * inv)
    }

    /// The glued curve `Ψ(x, t/x)` sampled on an annulus grid (in `y` on the
    /// second half).
    pub fn glued_curve(&self, grid: Arc<AnnulusGrid>) -> Result<MapSample> {
        if grid.chart != Chart::Annulus {
            return Err(GlueError::Config("the glued curve lives on an annulus grid".into()));
        }
        let t = grid.t;
        Ok(MapSample::from_fn(grid, 2, |side, z| {
            let p = if side == 0 { [z, t / z] } else { [t / z, z] };
            self.psi(&p).to_vec()
        }))
    }

    fn chart_points() -> Vec<[C64; 2]> {
        let ring = |i: usize| {
            C64::from_polar(
                ORACLE_CHART * (i / 8 + 1) as f64 / 4.0,
                (i % 8) as f64 * std::f64::consts::FRAC_PI_4 + 0.1 * (i / 8) as f64,
            )
        };
        let mut pts = vec![[zero(), zero()]];
        for a in 0..32 {
            for b in (0..32).step_by(3) {
                pts.push([ring(a), ring(b)]);
            }
        }
        pts
    }
}

/// Build `Ψ` with random coefficients of modulus at most `1/7` and check it
/// on the chart polydisk.
pub fn make_pushforward_oracle(seed: u64, amplitude: f64) -> Result<PushforwardOracle> {
    if !(0.0..=0.1).contains(&amplitude) {
        return Err(GlueError::Domain(format!("amplitude {amplitude} must lie in [0, 0.1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coeffs = [[zero(); 7]; 2];
    for row in coeffs.iter_mut() {
        for a in row.iter_mut() {
            *a = C64::from_polar(rng.gen::<f64>() / 7.0, rng.gen_range(0.0..std::f64::consts::TAU));
        }
    }
    let mut oracle = PushforwardOracle { amplitude, seed, coeffs, c1: 0.0 };
    let pts = PushforwardOracle::chart_points();
    let mut c1: f64 = 0.0;
    for z in &pts {
        let w = oracle.psi(z);
        let back = oracle.inverse(&w)?;
        let round = oracle.psi(&back);
        if max_dist(&round, &w) > 1e-10 || max_dist(&back, z) > 1e-10 {
            return Err(GlueError::Singular("Ψ∘Ψ⁻¹ differs from the identity on the chart".into()));
        }
        // Ψ∘h with h(ζ) = z + ζ·v holomorphic: ∂̄ = Ψ_z̄ v̄, ∂ = Ψ_z v
        let v = [C64::new(0.3, 0.1), C64::new(-0.2, 0.4)];
        let (jz, jzb) = oracle.jacobian(z);
        let dbar: Vec<C64> = (0..2).map(|r| (0..2).map(|c| jzb[(r, c)] * v[c].conj()).sum()).collect();
        let del: Vec<C64> = (0..2).map(|r| (0..2).map(|c| jz[(r, c)] * v[c]).sum()).collect();
        let qv = apply_q(&oracle.q_matrix(&w), &del);
        if max_dist(&dbar, &qv.iter().map(|x| -x).collect::<Vec<_>>()) > 1e-10 {
            return Err(GlueError::Singular("pushforward identity fails on the chart".into()));
        }
        let mut local = oracle.q_matrix(&w).norm();
        for j in 0..2 {
            let (a, b) = oracle.dq(&w, j);
            local = local.max(a.norm() + b.norm());
        }
        c1 = c1.max(local);
    }
    oracle.c1 = c1;
    Ok(oracle)
}

impl ACStructure for PushforwardOracle {
    fn dim(&self) -> usize {
        2
    }
    fn q_matrix(&self, w: &[C64]) -> DMatrix<C64> {
        if self.amplitude == 0.0 {
            return DMatrix::zeros(2, 2);
        }
        match self.inverse(w) {
            Ok(z) => self.q_at_preimage(&z),
            Err(_) => DMatrix::from_element(2, 2, C64::new(f64::NAN, f64::NAN)),
        }
    }
    fn c1_bound(&self) -> f64 {
        self.c1
    }
    fn is_trivial(&self) -> bool {
        self.amplitude == 0.0
    }
}

/// Symmetric nearest-sample distance between the images of two sampled maps.
pub fn grid_hausdorff(a: &MapSample, b: &MapSample) -> Result<f64> {
    if a.n != b.n {
        return Err(GlueError::Shape("maps have different target dimensions".into()));
    }
    let points = |f: &MapSample| -> Vec<Vec<C64>> {
        let g = &f.grid;
        let mut out = Vec::with_capacity(f.sides.len() * g.n_r * g.n_theta);
        for side in 0..f.sides.len() {
            for j in 0..g.n_r {
                for k in 0..g.n_theta {
                    out.push(f.at(side, j, k));
                }
            }
        }
        out
    };
    let (pa, pb) = (points(a), points(b));
    let directed = |from: &[Vec<C64>], to: &[Vec<C64>]| -> f64 {
        par::map(from, |u| {
            to.iter()
                .map(|v| u.iter().zip(v).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
        })
        .into_iter()
        .fold(0.0, f64::max)
        .sqrt()
    };
    Ok(directed(&pa, &pb).max(directed(&pb, &pa)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonStep {
    pub step: usize,
    /// `‖F(w_k)‖_{L^p}`.
    pub defect: f64,
    /// `‖w_k − w_{k−1}‖_{L^p_1}` (zero for the starting point).
    pub correction: f64,
}

/// The three measured factors of the Newton–Kantorovich test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KantorovichCheck {
    /// `‖R_t‖` from `L^p` to `L^p_1`.
    pub inverse_norm: f64,
    /// Second-order constant of `F_t`.
    pub c1: f64,
    /// `‖F_t(0)‖_{L^p}`.
    pub defect: f64,
    pub product: f64,
    pub limit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRecord {
    pub iterations: Vec<NewtonStep>,
    pub t: C64,
    pub p: f64,
    pub converged: bool,
    pub kantorovich: KantorovichCheck,
    /// `‖w* − w_t‖_{L^p_1}`.
    pub xi_norm: f64,
}

impl ConvergenceRecord {
    /// Ratios `defect_k / defect_{k−1}`.
    pub fn defect_ratios(&self) -> Vec<f64> {
        self.iterations.windows(2).map(|w| w[1].defect / w[0].defect).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewtonOptions {
    pub p: f64,
    /// Stop once `‖F(w)‖_{L^p}` is below this.
    pub tol: f64,
    /// A stalled defect below this is accepted.
    pub floor: f64,
    pub max_iter: usize,
    pub neumann: NeumannOptions,
    pub kantorovich_limit: f64,
    /// Random trials used to estimate `‖R_t‖` and the second-order constant.
    pub norm_trials: usize,
    pub seed: u64,
    /// Boundary Laurent data of the solution; the pregluing trace if absent.
    pub boundary: Option<BoundaryModes>,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            p: 4.0,
            tol: 1e-8,
            floor: 1e-8,
            max_iter: 12,
            neumann: NeumannOptions { p: 4.0, tol: 1e-10, floor: 1e-4, max_iter: 400 },
            kantorovich_limit: 0.25,
            norm_trials: 3,
            seed: 0,
            boundary: None,
        }
    }
}

/// Residual accepted when solving for random trial forms in the norm estimate.
const NORM_TRIAL_FLOOR: f64 = 1e-3;

struct NewtonContext<'a> {
    q: &'a dyn ACStructure,
    base: NodalOperator,
    opts: &'a NewtonOptions,
}

impl NewtonContext<'_> {
    fn defect(&self, w: &MapSample) -> Result<(ZeroOneForm, f64)> {
        let f = dbar_perturbed(w, self.q)?;
        let n = lp_norm_with(&f, self.opts.p, NormConvention::Induced, None);
        Ok((f, n))
    }

    fn solve(&self, w: &MapSample, rhs: &ZeroOneForm) -> Result<MapSample> {
        self.solve_to(w, rhs, self.opts.neumann.floor)
    }

    fn solve_to(&self, w: &MapSample, rhs: &ZeroOneForm, floor: f64) -> Result<MapSample> {
        let d = linearize_at(w, self.q)?;
        let neumann = NeumannOptions { p: self.opts.p, floor, ..self.opts.neumann };
        Ok(krylov_right_inverse(rhs, &d, &self.base, &neumann)?.xi)
    }

    fn l1p(&self, xi: &MapSample) -> f64 {
        l1p_norm_with(xi, self.opts.p, NormConvention::Induced, None)
    }

    fn lp(&self, f: &ZeroOneForm) -> f64 {
        lp_norm_with(f, self.opts.p, NormConvention::Induced, None)
    }

    fn kantorovich(&self, w: &MapSample, f0: &ZeroOneForm, defect: f64) -> Result<KantorovichCheck> {
        let limit = self.opts.kantorovich_limit;
        let grid = w.grid.clone();
        let n = w.n;
        let p = self.opts.p;
        let sample = |rng: &mut ChaCha8Rng| band_limit(&random_smooth::<FormKind>(grid.clone(), n, rng, 3, 3));
        // a norm estimate needs a few digits, not the Newton-step floor
        let trial_floor = self.opts.neumann.floor.max(NORM_TRIAL_FLOOR);
        let mut inverse_norm = estimate_operator_norm(
            |eta: &ZeroOneForm| self.solve_to(w, eta, trial_floor),
            sample,
            |eta| self.lp(eta),
            |xi| self.l1p(xi),
            p,
            self.opts.norm_trials,
            self.opts.seed,
        )?
        .estimate;
        let first = if defect > 0.0 { Some(self.solve(w, &f0.scale(C64::new(-1.0, 0.0)))?) } else { None };
        if let Some(xi) = &first {
            inverse_norm = inverse_norm.max(self.l1p(xi) / defect);
        }
        let c1 = if self.q.is_trivial() {
            0.0
        } else {
            // ‖F(w+ξ) − F(w) − DF(w)ξ‖ ≤ (C₁/2)‖ξ‖²
            let d = linearize_at(w, self.q)?;
            let mut directions: Vec<MapSample> = par::map_range(self.opts.norm_trials, |i| {
                let mut rng = ChaCha8Rng::seed_from_u64(crate::cauchy_ops::trial_seed(self.opts.seed ^ 0x5eed, i));
                random_smooth::<crate::geometry::MapKind>(grid.clone(), n, &mut rng, 3, 3)
            });
            directions.extend(first.clone());
            let mut c: f64 = 0.0;
            for xi in directions {
                let norm = self.l1p(&xi);
                if norm == 0.0 {
                    continue;
                }
                let xi = xi.scale(C64::new(0.05 / norm, 0.0));
                let s = self.l1p(&xi);
                let rem = self.defect(&w.add(&xi))?.0.sub(f0).sub(&d.apply(&xi)?);
                c = c.max(2.0 * self.lp(&rem) / (s * s));
            }
            c
        };
        let product = inverse_norm * inverse_norm * c1 * defect;
        Ok(KantorovichCheck { inverse_norm, c1, defect, product, limit })
    }
}

/// Solve `∂̄w + q(w)·∂w = 0` on `A_t` near the pregluing `w_t` by Newton's
/// method, each linear step inverted by the Neumann series built on the
/// nodal right inverse. The boundary Laurent data of the solution is fixed to
/// `opts.boundary` (default: that of `w_t`).
pub fn newton_solve(
    node: &NodeModel,
    grid: Arc<AnnulusGrid>,
    opts: &NewtonOptions,
) -> Result<(MapSample, ConvergenceRecord)> {
    check_p(opts.p)?;
    let w_t = preglue_w(node, grid.clone())?;
    let nodal = Arc::new(grid.with_chart(Chart::Nodal)?);
    let ctx = NewtonContext { q: node.structure.as_ref(), base: NodalOperator::new(nodal)?, opts };
    let target = match &opts.boundary {
        Some(b) => b.clone(),
        None => boundary_modes(&w_t)?,
    };
    let mut w = impose_boundary(&w_t, &target)?;
    let (mut f, mut defect) = ctx.defect(&w)?;
    let kantorovich = ctx.kantorovich(&w, &f, defect)?;
    if kantorovich.product > kantorovich.limit {
        return Err(GlueError::TooLarge { measured: kantorovich.product, limit: kantorovich.limit });
    }
    let mut record = ConvergenceRecord {
        iterations: vec![NewtonStep { step: 0, defect, correction: 0.0 }],
        t: grid.t,
        p: opts.p,
        converged: defect <= opts.tol,
        kantorovich,
        xi_norm: 0.0,
    };
    let mut step = 0;
    while !record.converged {
        step += 1;
        if step > opts.max_iter {
            return Err(GlueError::Iteration { iterations: opts.max_iter, defect });
        }
        let xi = ctx.solve(&w, &f.scale(C64::new(-1.0, 0.0)))?;
        w = w.add(&xi);
        let (nf, nd) = ctx.defect(&w)?;
        record.iterations.push(NewtonStep { step, defect: nd, correction: ctx.l1p(&xi) });
        let stalled = nd > 0.5 * defect;
        f = nf;
        defect = nd;
        if !defect.is_finite() || (stalled && defect > opts.floor) {
            return Err(GlueError::Iteration { iterations: step, defect });
        }
        record.converged = defect <= opts.tol || stalled;
    }
    record.xi_norm = ctx.l1p(&w.sub(&w_t));
    Ok((w, record))
}

/// One row of a gluing sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GluingRow {
    pub t_abs: f64,
    pub p: f64,
    pub defect_norm: f64,
    pub xi_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// A solved point of a gluing sweep.
#[derive(Debug, Clone)]
pub struct GluingSolution {
    pub row: GluingRow,
    pub solution: MapSample,
    pub record: ConvergenceRecord,
}

/// Newton solve at one `t`, with the pregluing defect.
pub fn gluing_solve(node: &NodeModel, t: C64, spec: GridSpec, opts: &NewtonOptions) -> Result<GluingSolution> {
    check_p(opts.p)?;
    let grid = spec.grid(t, Chart::Annulus)?;
    let defect = preglue_defect(node, grid.clone())?;
    let defect_norm = lp_norm_with(&defect, opts.p, NormConvention::Induced, None);
    let (solution, record) = newton_solve(node, grid, opts)?;
    let row = GluingRow {
        t_abs: t.norm(),
        p: opts.p,
        defect_norm,
        xi_norm: record.xi_norm,
        iterations: record.iterations.len() - 1,
        converged: record.converged,
    };
    Ok(GluingSolution { row, solution, record })
}

/// Newton solves over `t_list` (in parallel).
pub fn gluing_sweep(node: &NodeModel, t_list: &[C64], spec: GridSpec, opts: &NewtonOptions) -> Result<Vec<GluingRow>> {
    par::map(t_list, |&t| gluing_solve(node, t, spec, opts).map(|s| s.row)).into_iter().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub t_abs: f64,
    pub perturbation: f64,
    /// `‖w′ − w‖_{L^∞(A_t)}`.
    pub sup_difference: f64,
    /// `‖w′ − w‖_{L^p_1(A′_t)}`, `A′_t = A_t ∩ {|x|, |y| < 1/2}`.
    pub inner_l1p_difference: f64,
    /// Zero when the two solutions coincide.
    pub ratio: f64,
}

/// Solve twice, with the boundary data of `w_t` and with its modes `1` moved
/// by `eta`, and compare the two solutions on the inner part of `A_t`.
pub fn verify_annulus_stability(
    node: &NodeModel,
    grid: Arc<AnnulusGrid>,
    eta: f64,
    opts: &NewtonOptions,
) -> Result<StabilityReport> {
    let w_t = preglue_w(node, grid.clone())?;
    let base = match &opts.boundary {
        Some(b) => b.clone(),
        None => boundary_modes(&w_t)?,
    };
    let mut moved = base.clone();
    for c in 0..node.dim() {
        moved.plus[c][1] += eta;
        moved.minus[c][1] += eta;
    }
    let run = |b: BoundaryModes| newton_solve(node, grid.clone(), &NewtonOptions { boundary: Some(b), ..opts.clone() });
    let ((w, _), (w2, _)) = (run(base)?, run(moved)?);
    let diff = w2.sub(&w);
    let sup = lp_norm_with(&diff, f64::INFINITY, NormConvention::Flat, None);
    let inner: &Mask = &|_, r, _| r < 0.5;
    let l1p = l1p_norm_with(&diff, opts.p, NormConvention::Induced, Some(inner));
    let ratio = if sup == 0.0 { 0.0 } else { l1p / sup };
    Ok(StabilityReport {
        t_abs: grid.t.norm(),
        perturbation: eta,
        sup_difference: sup,
        inner_l1p_difference: l1p,
        ratio,
    })
}
