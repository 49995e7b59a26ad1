//! The perturbed Cauchy–Riemann operator `∂̄w + q(w)·∂w`, its linearization,
//! and the inverses assembled from the nodal model.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cauchy_ops::{
    cauchy_transform, hole_transfer, holomorphic_from_boundary, resolvent_solve, BoundaryModes, MatrixSample,
};
use crate::error::{GlueError, Result};
use crate::geometry::{
    beta_cutoff, dbar, del, l1p_norm_with, lp_norm_with, mode_limit, AnnulusGrid, Chart, Field, FormDegree, MapSample,
    Mask, NormConvention, Sampled, ZeroOneForm,
};
use crate::numerics::{bin_of_mode, mode_of_bin, C64, I};
use crate::par;

fn zero() -> C64 {
    C64::new(0.0, 0.0)
}

/// An almost complex structure near the origin of `Cⁿ`, written as the
/// antilinear field `q`: `J`-holomorphic maps solve `∂̄w + q(w)·∂w = 0`.
pub trait ACStructure: Send + Sync {
    fn dim(&self) -> usize;

    /// Matrix `Q(w)` with `q(w)·v = Q(w) v̄`.
    fn q_matrix(&self, w: &[C64]) -> DMatrix<C64>;

    /// `‖q‖_{C¹}` on the working chart.
    fn c1_bound(&self) -> f64;

    fn is_trivial(&self) -> bool {
        false
    }

    /// Wirtinger derivatives `(∂Q/∂w_j, ∂Q/∂w̄_j)`, by central differences.
    fn dq(&self, w: &[C64], j: usize) -> (DMatrix<C64>, DMatrix<C64>) {
        let eps = 1e-5;
        let shifted = |d: C64| {
            let mut v = w.to_vec();
            v[j] += d;
            self.q_matrix(&v)
        };
        let qx = (shifted(C64::new(eps, 0.0)) - shifted(C64::new(-eps, 0.0))) / C64::new(2.0 * eps, 0.0);
        let qy = (shifted(C64::new(0.0, eps)) - shifted(C64::new(0.0, -eps))) / C64::new(2.0 * eps, 0.0);
        ((&qx - &qy * I) * C64::new(0.5, 0.0), (&qx + &qy * I) * C64::new(0.5, 0.0))
    }
}

/// The standard structure, `q ≡ 0`.
#[derive(Debug, Clone, Copy)]
pub struct StandardStructure {
    pub n: usize,
}

impl ACStructure for StandardStructure {
    fn dim(&self) -> usize {
        self.n
    }
    fn q_matrix(&self, _w: &[C64]) -> DMatrix<C64> {
        DMatrix::zeros(self.n, self.n)
    }
    fn c1_bound(&self) -> f64 {
        0.0
    }
    fn is_trivial(&self) -> bool {
        true
    }
    fn dq(&self, _w: &[C64], _j: usize) -> (DMatrix<C64>, DMatrix<C64>) {
        (DMatrix::zeros(self.n, self.n), DMatrix::zeros(self.n, self.n))
    }
}

/// `Q(w) = Q₀ + Σ_j (A_j w_j + B_j w̄_j)`.
#[derive(Debug, Clone)]
pub struct AffineStructure {
    pub q0: DMatrix<C64>,
    pub a: Vec<DMatrix<C64>>,
    pub b: Vec<DMatrix<C64>>,
}

impl AffineStructure {
    /// Random entries of modulus `<= amplitude / n`; `Q₀ = 0` unless
    /// `with_constant`.
    pub fn random(n: usize, amplitude: f64, seed: u64, with_constant: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = amplitude / n as f64;
        let mat = |rng: &mut ChaCha8Rng| {
            DMatrix::from_fn(n, n, |_, _| {
                C64::from_polar(scale * rng.gen::<f64>(), rng.gen_range(0.0..std::f64::consts::TAU))
            })
        };
        let q0 = if with_constant { mat(&mut rng) } else { DMatrix::zeros(n, n) };
        let a = (0..n).map(|_| mat(&mut rng)).collect();
        let b = (0..n).map(|_| mat(&mut rng)).collect();
        AffineStructure { q0, a, b }
    }
}

impl ACStructure for AffineStructure {
    fn dim(&self) -> usize {
        self.q0.nrows()
    }
    fn q_matrix(&self, w: &[C64]) -> DMatrix<C64> {
        let mut q = self.q0.clone();
        for j in 0..w.len() {
            q += &self.a[j] * w[j] + &self.b[j] * w[j].conj();
        }
        q
    }
    fn c1_bound(&self) -> f64 {
        // sup of |Q| and |dQ| over the unit polydisk
        let d: f64 = self.a.iter().chain(&self.b).map(|m| m.norm()).sum();
        self.q0.norm() + 2.0 * d
    }
    fn dq(&self, _w: &[C64], j: usize) -> (DMatrix<C64>, DMatrix<C64>) {
        (self.a[j].clone(), self.b[j].clone())
    }
}

/// Per-sample `n × n` matrices on every side, row-major per sample.
#[derive(Debug, Clone)]
struct PointMatrices {
    n: usize,
    sides: Vec<Vec<C64>>,
}

impl PointMatrices {
    fn at(&self, side: usize, i: usize) -> &[C64] {
        let nn = self.n * self.n;
        &self.sides[side][i * nn..(i + 1) * nn]
    }
}

fn mat_vec(m: &[C64], n: usize, v: &[C64], conj: bool, out: &mut [C64]) {
    for r in 0..n {
        let mut acc = zero();
        for c in 0..n {
            let x = if conj { v[c].conj() } else { v[c] };
            acc += m[r * n + c] * x;
        }
        out[r] += acc;
    }
}

/// Build a field sample by sample from `f(side, j, k)`.
fn build<K: FormDegree>(
    grid: &Arc<AnnulusGrid>,
    n: usize,
    f: impl Fn(usize, usize, usize) -> Vec<C64> + Sync,
) -> Sampled<K> {
    let (nr, nt) = (grid.n_r, grid.n_theta);
    let sides = (0..grid.sides())
        .map(|side| {
            let vals = par::map_range(nr * nt, |i| f(side, i / nt, i % nt));
            let mut field = Field::zeros(n, nr, nt);
            for (i, v) in vals.iter().enumerate() {
                for c in 0..n {
                    field.set(c, i / nt, i % nt, v[c]);
                }
            }
            field
        })
        .collect();
    Sampled::from_sides(grid.clone(), n, sides).expect("consistent shape")
}

/// Keep the angular band reachable by the grid `∂̄` (modes `1 − L ..= L`).
pub fn band_limit(f: &ZeroOneForm) -> ZeroOneForm {
    let nt = f.grid.n_theta;
    let limit = mode_limit(nt);
    let mut modes = f.modes();
    for m in modes.iter_mut() {
        for c in 0..f.n {
            for j in 0..f.grid.n_r {
                for b in 0..nt {
                    let mode = mode_of_bin(b, nt);
                    if mode < 1 - limit || mode > limit {
                        m.set(c, j, b, zero());
                    }
                }
            }
        }
    }
    ZeroOneForm::from_mode_sides(f.grid.clone(), f.n, &modes)
}

fn check_dim(w: &MapSample, q: &dyn ACStructure) -> Result<()> {
    if w.n != q.dim() {
        return Err(GlueError::Shape(format!("map has {} components, structure acts on C^{}", w.n, q.dim())));
    }
    Ok(())
}

/// `∂̄w + q(w)·∂w`, sample by sample in each side's own coordinate.
pub fn dbar_perturbed(w: &MapSample, q: &dyn ACStructure) -> Result<ZeroOneForm> {
    check_dim(w, q)?;
    let d = dbar(w);
    if q.is_trivial() {
        return Ok(d);
    }
    let dw = del(w);
    let n = w.n;
    let out: ZeroOneForm = build(&w.grid, n, |side, j, k| {
        let qm = q.q_matrix(&w.at(side, j, k));
        let dv = dw.at(side, j, k);
        (0..n).map(|r| d.sides[side].get(r, j, k) + (0..n).map(|c| qm[(r, c)] * dv[c].conj()).sum::<C64>()).collect()
    });
    Ok(band_limit(&out))
}

/// `D_w ξ = ∂̄ξ + q(w)·∂ξ + (dq(w)·ξ)·∂w`, stored as
/// `∂̄ξ + Q conj(∂ξ) + Bξ + C ξ̄` with pointwise matrices `Q, B, C`.
#[derive(Debug, Clone)]
pub struct LinearizedOperator {
    pub grid: Arc<AnnulusGrid>,
    pub n: usize,
    trivial: bool,
    q: PointMatrices,
    b: PointMatrices,
    c: PointMatrices,
}

/// Linearize `dbar_perturbed` at `w`.
pub fn linearize_at(w: &MapSample, q: &dyn ACStructure) -> Result<LinearizedOperator> {
    check_dim(w, q)?;
    let grid = w.grid.clone();
    let n = w.n;
    let (nr, nt) = (grid.n_r, grid.n_theta);
    let empty = || PointMatrices { n, sides: vec![] };
    if q.is_trivial() {
        return Ok(LinearizedOperator { grid, n, trivial: true, q: empty(), b: empty(), c: empty() });
    }
    let dw = del(w);
    let mut qs = Vec::new();
    let mut bs = Vec::new();
    let mut cs = Vec::new();
    for side in 0..grid.sides() {
        let per: Vec<(Vec<C64>, Vec<C64>, Vec<C64>)> = par::map_range(nr * nt, |i| {
            let (j, k) = (i / nt, i % nt);
            let wv = w.at(side, j, k);
            let dv: Vec<C64> = dw.at(side, j, k).iter().map(|z| z.conj()).collect();
            let qm = q.q_matrix(&wv);
            let mut bm = vec![zero(); n * n];
            let mut cm = vec![zero(); n * n];
            for col in 0..n {
                let (dz, dzb) = q.dq(&wv, col);
                for r in 0..n {
                    let mut sb = zero();
                    let mut sc = zero();
                    for l in 0..n {
                        sb += dz[(r, l)] * dv[l];
                        sc += dzb[(r, l)] * dv[l];
                    }
                    bm[r * n + col] = sb;
                    cm[r * n + col] = sc;
                }
            }
            let qv = (0..n * n).map(|idx| qm[(idx / n, idx % n)]).collect();
            (qv, bm, cm)
        });
        qs.push(per.iter().flat_map(|p| p.0.iter().copied()).collect());
        bs.push(per.iter().flat_map(|p| p.1.iter().copied()).collect());
        cs.push(per.iter().flat_map(|p| p.2.iter().copied()).collect());
    }
    Ok(LinearizedOperator {
        grid,
        n,
        trivial: false,
        q: PointMatrices { n, sides: qs },
        b: PointMatrices { n, sides: bs },
        c: PointMatrices { n, sides: cs },
    })
}

impl LinearizedOperator {
    pub fn is_trivial(&self) -> bool {
        self.trivial
    }

    pub fn apply(&self, xi: &MapSample) -> Result<ZeroOneForm> {
        if xi.n != self.n || !xi.grid.same_sampling(&self.grid) {
            return Err(GlueError::Shape("section does not live on the operator's grid".into()));
        }
        let d = dbar(xi);
        if self.trivial {
            return Ok(d);
        }
        let dx = del(xi);
        let n = self.n;
        let nt = self.grid.n_theta;
        let out: ZeroOneForm = build(&self.grid, n, |side, j, k| {
            let i = j * nt + k;
            let mut v = d.at(side, j, k);
            let x = xi.at(side, j, k);
            mat_vec(self.q.at(side, i), n, &dx.at(side, j, k), true, &mut v);
            mat_vec(self.b.at(side, i), n, &x, false, &mut v);
            mat_vec(self.c.at(side, i), n, &x, true, &mut v);
            v
        });
        Ok(band_limit(&out))
    }
}

/// A section over the nodal model: its two branches sampled on a nodal grid
/// and the common value at the node.
#[derive(Debug, Clone)]
pub struct NodalSection {
    pub branches: MapSample,
    pub node: Vec<C64>,
}

impl NodalSection {
    /// Value at the node of the holomorphic extension of each branch.
    pub fn branch_node_values(&self) -> Vec<Vec<C64>> {
        let modes = self.branches.modes();
        let b0 = bin_of_mode(0, self.branches.grid.n_theta).unwrap();
        modes.iter().map(|m| (0..self.branches.n).map(|c| m.get(c, 0, b0)).collect()).collect()
    }
}

/// Right inverse `R̃` of the nodal operator: the disk Cauchy transform on
/// each branch, the second branch shifted by a constant so that both take the
/// same value at the node. Lower-order terms of the linearization are left to
/// the Neumann correction.
#[derive(Debug, Clone)]
pub struct NodalOperator {
    pub grid: Arc<AnnulusGrid>,
}

impl NodalOperator {
    pub fn new(grid: Arc<AnnulusGrid>) -> Result<Self> {
        if grid.chart != Chart::Nodal {
            return Err(GlueError::Config("the nodal right inverse needs a nodal grid".into()));
        }
        Ok(NodalOperator { grid })
    }

    pub fn right_inverse(&self, g: &ZeroOneForm) -> Result<NodalSection> {
        if !g.grid.same_sampling(&self.grid) {
            return Err(GlueError::Shape("form is not sampled on the nodal grid".into()));
        }
        let p = cauchy_transform(g)?;
        let mut sec = NodalSection { branches: p, node: vec![] };
        let vals = sec.branch_node_values();
        let shift: Vec<C64> = (0..g.n).map(|c| vals[0][c] - vals[1][c]).collect();
        let field = &mut sec.branches.sides[1];
        let block = field.n_r * field.n_theta;
        for c in 0..g.n {
            field.data[c * block..(c + 1) * block].iter_mut().for_each(|v| *v += shift[c]);
        }
        sec.node = vals[0].clone();
        Ok(sec)
    }
}

/// `E_t`: on `{|x| >= |y|}` the value `ξ(x,0) + β_{|t|}(x)(ξ(0,t/x) − ξ(node))`,
/// symmetrically on the other half. The branch evaluated inside its inner
/// circle is continued holomorphically.
pub fn extension_operator(xi: &NodalSection, annulus: Arc<AnnulusGrid>) -> Result<MapSample> {
    if xi.branches.sides.len() != 2 || xi.branches.grid.chart != Chart::Nodal {
        return Err(GlueError::Input("both branch values of the nodal section are required".into()));
    }
    if xi.node.len() != xi.branches.n {
        return Err(GlueError::Input("node value missing".into()));
    }
    if annulus.chart != Chart::Annulus || !annulus.same_points(&xi.branches.grid) {
        return Err(GlueError::Shape("annulus grid does not match the nodal grid".into()));
    }
    let n = xi.branches.n;
    let modes = xi.branches.modes();
    let cross = [
        hole_transfer(&annulus, &modes[1]).from_modes(&annulus),
        hole_transfer(&annulus, &modes[0]).from_modes(&annulus),
    ];
    let delta = annulus.t.norm();
    let betas: Vec<f64> =
        annulus.r_levels.iter().map(|&r| beta_cutoff(delta, C64::new(r, 0.0))).collect::<Result<_>>()?;
    let out: MapSample = build(&annulus, n, |side, j, k| {
        (0..n)
            .map(|c| xi.branches.sides[side].get(c, j, k) + (cross[side].get(c, j, k) - xi.node[c]) * betas[j])
            .collect()
    });
    Ok(out)
}

/// Output of the quasi-inverse: the (empty at desk scale) complex-structure
/// slot, the section on `A_t` and the intermediate nodal section.
#[derive(Debug, Clone)]
pub struct QuasiInverseOutput {
    pub v_slot: Vec<f64>,
    pub xi: MapSample,
    pub nodal: NodalSection,
}

/// `Q_t = (Id × E_t) ∘ R̃ ∘ (π_t^{*−1} ∪ 0)`.
pub fn quasi_inverse(eta: &ZeroOneForm, base: &NodalOperator) -> Result<QuasiInverseOutput> {
    if eta.grid.chart != Chart::Annulus {
        return Err(GlueError::Config("the quasi-inverse acts on forms over A_t".into()));
    }
    if !eta.grid.same_points(&base.grid) {
        return Err(GlueError::Config("nodal right inverse was built for a different t or grid".into()));
    }
    let g = eta.rechart(base.grid.clone())?;
    let nodal = base.right_inverse(&g)?;
    let xi = extension_operator(&nodal, eta.grid.clone())?;
    Ok(QuasiInverseOutput { v_slot: vec![], xi, nodal })
}

/// `‖D_t Q_t η − η‖_{L^p} / ‖η‖_{L^p}`.
pub fn quasi_inverse_discrepancy(
    eta: &ZeroOneForm,
    d_t: &LinearizedOperator,
    base: &NodalOperator,
    p: f64,
) -> Result<f64> {
    let en = lp_norm_with(eta, p, NormConvention::Induced, None);
    if en == 0.0 {
        return Ok(0.0);
    }
    let q = quasi_inverse(eta, base)?;
    let r = d_t.apply(&q.xi)?.sub(eta);
    Ok(lp_norm_with(&r, p, NormConvention::Induced, None) / en)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeumannOptions {
    pub p: f64,
    pub tol: f64,
    /// A stalled relative residual below this is accepted.
    pub floor: f64,
    pub max_iter: usize,
}

impl Default for NeumannOptions {
    fn default() -> Self {
        NeumannOptions { p: 4.0, tol: 1e-10, floor: 1e-8, max_iter: 100 }
    }
}

#[derive(Debug, Clone)]
pub struct NeumannSolution {
    pub v_slot: Vec<f64>,
    pub xi: MapSample,
    pub iterations: usize,
    /// Relative residual `‖D_t ξ − η‖/‖η‖` at exit.
    pub residual: f64,
    /// Relative discrepancy of the first quasi-inverse step.
    pub rho: f64,
}

/// Largest admissible quasi-inverse discrepancy.
pub const NEUMANN_RHO_LIMIT: f64 = 0.5;

/// `R_t η = Q_t Σ_k (Id − D_t Q_t)^k η`, summed until the relative residual
/// drops below `opts.tol`.
pub fn neumann_right_inverse(
    eta: &ZeroOneForm,
    d_t: &LinearizedOperator,
    base: &NodalOperator,
    opts: &NeumannOptions,
) -> Result<NeumannSolution> {
    let en = lp_norm_with(eta, opts.p, NormConvention::Induced, None);
    let mut xi = MapSample::zeros(eta.grid.clone(), eta.n);
    if en == 0.0 {
        return Ok(NeumannSolution { v_slot: vec![], xi, iterations: 0, residual: 0.0, rho: 0.0 });
    }
    let mut r = eta.clone();
    let mut rho = f64::NAN;
    let mut prev = f64::INFINITY;
    for it in 1..=opts.max_iter {
        xi = xi.add(&quasi_inverse(&r, base)?.xi);
        r = eta.sub(&d_t.apply(&xi)?);
        let rel = lp_norm_with(&r, opts.p, NormConvention::Induced, None) / en;
        if it == 1 {
            rho = rel;
            if rho >= NEUMANN_RHO_LIMIT {
                return Err(GlueError::TooLarge { measured: rho, limit: NEUMANN_RHO_LIMIT });
            }
        }
        let stalled = it > 2 && rel > 0.5 * prev;
        if rel <= opts.tol || (stalled && rel <= opts.floor) {
            return Ok(NeumannSolution { v_slot: vec![], xi, iterations: it, residual: rel, rho });
        }
        if stalled {
            return Err(GlueError::Iteration { iterations: it, defect: rel });
        }
        prev = rel;
    }
    let rel = lp_norm_with(&r, opts.p, NormConvention::Induced, None) / en;
    Err(GlueError::Iteration { iterations: opts.max_iter, defect: rel })
}

/// Krylov dimension between restarts of [`krylov_right_inverse`].
const GMRES_RESTART: usize = 100;

/// `R_t η = Q_t y` with `D_t Q_t y = η` solved by restarted GMRES (real
/// inner product, since `D_t` is only real-linear). Same preconditioner and
/// quasi-inverse test as [`neumann_right_inverse`], but it is not held back by
/// eigenvalues of `D_t Q_t` near zero. `opts.max_iter` counts Krylov steps.
pub fn krylov_right_inverse(
    eta: &ZeroOneForm,
    d_t: &LinearizedOperator,
    base: &NodalOperator,
    opts: &NeumannOptions,
) -> Result<NeumannSolution> {
    let lp = |f: &ZeroOneForm| lp_norm_with(f, opts.p, NormConvention::Induced, None);
    let real = |x: f64| C64::new(x, 0.0);
    let en = lp(eta);
    let mut xi = MapSample::zeros(eta.grid.clone(), eta.n);
    if en == 0.0 {
        return Ok(NeumannSolution { v_slot: vec![], xi, iterations: 0, residual: 0.0, rho: 0.0 });
    }
    let e2 = eta.real_dot(eta).sqrt();
    let mut r = eta.clone();
    let mut rho = f64::NAN;
    let mut total = 0;
    let mut prev = f64::INFINITY;
    loop {
        let beta = r.real_dot(&r).sqrt();
        let mut basis = vec![r.scale(real(1.0 / beta))];
        let mut images: Vec<MapSample> = Vec::new();
        let mut cols: Vec<Vec<f64>> = Vec::new();
        let (mut cs, mut sn): (Vec<f64>, Vec<f64>) = (Vec::new(), Vec::new());
        let mut g = vec![beta];
        for j in 0..GMRES_RESTART {
            total += 1;
            let z = quasi_inverse(&basis[j], base)?.xi;
            let mut w = d_t.apply(&z)?;
            if total == 1 {
                rho = lp(&eta.sub(&w.scale(real(beta)))) / en;
                if rho >= NEUMANN_RHO_LIMIT {
                    return Err(GlueError::TooLarge { measured: rho, limit: NEUMANN_RHO_LIMIT });
                }
            }
            images.push(z);
            let mut h = vec![0.0; j + 2];
            for (i, v) in basis.iter().enumerate() {
                h[i] = w.real_dot(v);
                w = w.axpy(real(-h[i]), v);
            }
            h[j + 1] = w.real_dot(&w).sqrt();
            for i in 0..j {
                let a = cs[i] * h[i] + sn[i] * h[i + 1];
                h[i + 1] = -sn[i] * h[i] + cs[i] * h[i + 1];
                h[i] = a;
            }
            let d = h[j].hypot(h[j + 1]);
            let (c, s) = if d == 0.0 { (1.0, 0.0) } else { (h[j] / d, h[j + 1] / d) };
            cs.push(c);
            sn.push(s);
            h[j] = d;
            h[j + 1] = 0.0;
            g.push(-s * g[j]);
            g[j] *= c;
            let next_norm = w.real_dot(&w).sqrt();
            cols.push(h);
            if g[j + 1].abs() <= 0.1 * opts.tol * e2 || next_norm == 0.0 || total >= opts.max_iter {
                break;
            }
            basis.push(w.scale(real(1.0 / next_norm)));
        }
        let k = cols.len();
        let mut y = vec![0.0; k];
        for i in (0..k).rev() {
            let s: f64 = (i + 1..k).map(|l| cols[l][i] * y[l]).sum();
            y[i] = if cols[i][i] == 0.0 { 0.0 } else { (g[i] - s) / cols[i][i] };
        }
        for (yi, z) in y.iter().zip(&images) {
            xi = xi.axpy(real(*yi), z);
        }
        r = eta.sub(&d_t.apply(&xi)?);
        let rel = lp(&r) / en;
        let stalled = rel > 0.5 * prev;
        if rel <= opts.tol || (stalled && rel <= opts.floor) {
            return Ok(NeumannSolution { v_slot: vec![], xi, iterations: total, residual: rel, rho });
        }
        if stalled || total >= opts.max_iter {
            return Err(GlueError::Iteration { iterations: total, defect: rel });
        }
        prev = rel;
    }
}

/// An element `(v, ξ)` of the domain of the nodal operator.
#[derive(Debug, Clone)]
pub struct KernelElement {
    pub v: Vec<f64>,
    pub xi: MapSample,
}

impl KernelElement {
    fn axpy(&self, a: f64, other: &KernelElement) -> KernelElement {
        KernelElement {
            v: self.v.iter().zip(&other.v).map(|(x, y)| x + a * y).collect(),
            xi: self.xi.axpy(C64::new(a, 0.0), &other.xi),
        }
    }
}

/// `|v|² + ∫_mask |ξ|²`, real part of the pairing.
fn masked_pair(a: &KernelElement, b: &KernelElement, mask: &Mask) -> f64 {
    let vv: f64 = a.v.iter().zip(&b.v).map(|(x, y)| x * y).sum();
    vv + a.xi.inner(&b.xi, NormConvention::Induced, Some(mask)).re
}

#[derive(Debug, Clone)]
pub struct KernelProjection {
    pub coords: Vec<f64>,
    pub projection: KernelElement,
    /// Masked norm of `input − projection`.
    pub residual_norm: f64,
}

/// Minimiser over the real span of `basis` of `|v₀ − v|² + ∫_mask |ξ₀ − ξ|²`.
pub fn kernel_projection(input: &KernelElement, basis: &[KernelElement], mask: &Mask) -> Result<KernelProjection> {
    if basis.is_empty() {
        return Err(GlueError::Rank("empty kernel basis".into()));
    }
    let k = basis.len();
    let pairs: Vec<(usize, usize)> = (0..k).flat_map(|i| (i..k).map(move |j| (i, j))).collect();
    let vals = par::map(&pairs, |&(i, j)| masked_pair(&basis[i], &basis[j], mask));
    let mut gram = DMatrix::<f64>::zeros(k, k);
    for (&(i, j), v) in pairs.iter().zip(vals) {
        gram[(i, j)] = v;
        gram[(j, i)] = v;
    }
    let rhs = nalgebra::DVector::from_iterator(k, basis.iter().map(|b| masked_pair(b, input, mask)));
    let max_diag = (0..k).map(|i| gram[(i, i)]).fold(0.0, f64::max);
    let eig = gram.clone().symmetric_eigen();
    let min_eig = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min_eig > 1e-12 * max_diag) {
        return Err(GlueError::Rank(format!("kernel Gram matrix is degenerate (min eigenvalue {min_eig:.3e})")));
    }
    let coords = gram.cholesky().ok_or_else(|| GlueError::Rank("Gram matrix not positive".into()))?.solve(&rhs);
    let mut proj =
        KernelElement { v: vec![0.0; input.v.len()], xi: MapSample::zeros(input.xi.grid.clone(), input.xi.n) };
    for (c, b) in coords.iter().zip(basis) {
        proj = proj.axpy(*c, b);
    }
    let diff = input.axpy(-1.0, &proj);
    let residual_norm = masked_pair(&diff, &diff, mask).max(0.0).sqrt();
    Ok(KernelProjection { coords: coords.iter().copied().collect(), projection: proj, residual_norm })
}

/// Null vector of the box discretisation of `f' − m f = 0` on the grid's
/// `s` levels, scaled to 1 at the outer circle.
fn box_null_profile(s: &[f64], m: i64) -> Result<Vec<f64>> {
    let n = s.len();
    // padded with a zero row so the SVD returns the full right basis
    let mut a = DMatrix::<f64>::zeros(n, n);
    for j in 0..n - 1 {
        let h = s[j + 1] - s[j];
        a[(j, j)] = -1.0 / h - 0.5 * m as f64;
        a[(j, j + 1)] = 1.0 / h - 0.5 * m as f64;
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t.ok_or_else(|| GlueError::Rank("no singular vectors".into()))?;
    let (imin, _) =
        svd.singular_values
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
    let mut v: Vec<f64> = vt.row(imin).iter().copied().collect();
    let last = v[n - 1];
    if last.abs() < 1e-300 {
        return Err(GlueError::Rank(format!("mode {m} null vector vanishes at the boundary")));
    }
    v.iter_mut().for_each(|x| *x /= last);
    Ok(v)
}

/// Kernel of the nodal `∂̄` operator restricted to angular modes `<= max_mode`:
/// constants shared by both branches and, per branch, the discrete null
/// profiles of modes `1..=max_mode` vanishing at the node. Real and imaginary
/// multiples of every component are included.
pub fn nodal_kernel_basis(grid: Arc<AnnulusGrid>, n: usize, max_mode: i64) -> Result<Vec<KernelElement>> {
    if grid.chart != Chart::Nodal {
        return Err(GlueError::Config("kernel basis lives on a nodal grid".into()));
    }
    if max_mode < 0 || max_mode > mode_limit(grid.n_theta) {
        return Err(GlueError::Resolution(format!("mode {max_mode} exceeds the angular band")));
    }
    let (nr, nt) = (grid.n_r, grid.n_theta);
    let mut out = Vec::new();
    for m in 0..=max_mode {
        let prof = box_null_profile(&grid.s_levels, m)?;
        let b = bin_of_mode(m, nt).unwrap();
        let branches: &[usize] = if m == 0 { &[2] } else { &[0, 1] };
        for &branch in branches {
            for c in 0..n {
                for unit in [C64::new(1.0, 0.0), I] {
                    let mut sides = vec![Field::zeros(n, nr, nt), Field::zeros(n, nr, nt)];
                    for (side, field) in sides.iter_mut().enumerate() {
                        if branch == 2 || branch == side {
                            for j in 0..nr {
                                field.set(c, j, b, unit * prof[j]);
                            }
                        }
                    }
                    out.push(KernelElement { v: vec![], xi: MapSample::from_mode_sides(grid.clone(), n, &sides) });
                }
            }
        }
    }
    Ok(out)
}

/// Empirical constant `C` in `‖χ(v,ξ)‖_{L²} >= C⁻¹‖(v,ξ)‖_{L^p_1}` over
/// random kernel elements.
pub fn kernel_norm_constant(basis: &[KernelElement], mask: &Mask, p: f64, trials: usize, seed: u64) -> Result<f64> {
    let ratios = par::map_range(trials, |i| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::cauchy_ops::trial_seed(seed, i));
        let mut el = KernelElement { v: vec![], xi: MapSample::zeros(basis[0].xi.grid.clone(), basis[0].xi.n) };
        for b in basis {
            el = el.axpy(rng.gen_range(-1.0..1.0), b);
        }
        let proj = kernel_projection(&el, basis, mask)?;
        let l2 = masked_pair(&proj.projection, &proj.projection, mask).sqrt();
        let vnorm: f64 = el.v.iter().map(|x| x * x).sum::<f64>().sqrt();
        Ok((vnorm + l1p_norm_with(&el.xi, p, NormConvention::Induced, None)) / l2)
    });
    let mut c: f64 = 0.0;
    for r in ratios {
        c = c.max(r?);
    }
    Ok(c)
}

/// One trial of the weak maximum principle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaxPrincipleTrial {
    pub t_abs: f64,
    pub a_sup: f64,
    pub interior_sup: f64,
    pub boundary_sup: f64,
    pub ratio: f64,
    pub phi_sup: f64,
    pub phi_inv_sup: f64,
    /// Fixed-point residual of the resolvent `Φ`.
    pub resolvent_residual: f64,
}

/// Maximum-principle constant for the tests below.
pub const MAX_PRINCIPLE_CONSTANT: f64 = 4.0;

/// Build `ξ = (Id + q(w))⁻¹(Φ·h)` with `∂̄Φ = AΦ` for a random smooth `A` of
/// sup norm `a_sup` and a random holomorphic `h`, and compare `sup |ξ|` over
/// `A_t` with its sup over the two boundary circles.
pub fn max_principle_trial(w: &MapSample, q: &dyn ACStructure, a_sup: f64, seed: u64) -> Result<MaxPrincipleTrial> {
    check_dim(w, q)?;
    let grid = w.grid.clone();
    let n = w.n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let terms: Vec<(i64, DMatrix<C64>)> = (-2..=2)
        .map(|m| (m, DMatrix::from_fn(n, n, |_, _| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))))
        .collect();
    let raw = MatrixSample::from_fn(grid.clone(), n, |_, z| {
        let r = z.norm();
        let mut m = DMatrix::zeros(n, n);
        for (k, c) in &terms {
            m += c * C64::from_polar(1.0 - 0.5 * r * r, *k as f64 * z.arg());
        }
        m
    });
    let scale = a_sup / raw.sup_norm().max(1e-300);
    let a = MatrixSample { n, cols: raw.cols.iter().map(|c| c.scale(C64::new(scale, 0.0))).collect() };
    let sol = resolvent_solve(&a, 4.0, None, 1e-12)?;
    let mut data = BoundaryModes::zeros(n, grid.n_theta);
    for c in 0..n {
        for m in 0..=3usize {
            data.plus[c][m] = C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            if m >= 1 {
                data.minus[c][m] = C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            }
        }
    }
    let h = holomorphic_from_boundary(grid.clone(), &data)?;
    let v: MapSample = build(&grid, n, |side, j, k| {
        let hv = h.at(side, j, k);
        (0..n).map(|r| (0..n).map(|c| sol.phi.cols[c].sides[side].get(r, j, k) * hv[c]).sum()).collect()
    });
    // ξ + Q(w) ξ̄ = v by fixed point; ‖Q‖ < 1/2 makes it contract
    let xi: MapSample = build(&grid, n, |side, j, k| {
        let qm = q.q_matrix(&w.at(side, j, k));
        let rhs = v.at(side, j, k);
        let mut x = rhs.clone();
        for _ in 0..200 {
            let next: Vec<C64> =
                (0..n).map(|r| rhs[r] - (0..n).map(|c| qm[(r, c)] * x[c].conj()).sum::<C64>()).collect();
            let change: f64 = next.iter().zip(&x).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
            x = next;
            if change < 1e-16 {
                break;
            }
        }
        x
    });
    let norm_at = |side: usize, j: usize, k: usize| xi.at(side, j, k).iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    let (nr, nt) = (grid.n_r, grid.n_theta);
    let mut interior: f64 = 0.0;
    let mut boundary: f64 = 0.0;
    for side in 0..grid.sides() {
        for j in 0..nr {
            for k in 0..nt {
                let v = norm_at(side, j, k);
                interior = interior.max(v);
                if j == nr - 1 {
                    boundary = boundary.max(v);
                }
            }
        }
    }
    Ok(MaxPrincipleTrial {
        t_abs: grid.t.norm(),
        a_sup,
        interior_sup: interior,
        boundary_sup: boundary,
        ratio: interior / boundary,
        phi_sup: sol.sup_phi,
        phi_inv_sup: sol.sup_phi_inv,
        resolvent_residual: sol.residual,
    })
}

/// Zero-order perturbation `a` of the `∂̄` operator on `O(k)` over the sphere.
/// On the cylinder `z = e^{s+iθ}` it acts on the mode profiles through
/// `2r e^{−iθ} a = bump(s) Σ_{l=−1}^{1} c_l e^{ilθ}`, `bump` supported in `|s| < 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineBundlePerturbation {
    pub coeffs: [C64; 3],
}

impl LineBundlePerturbation {
    pub fn zero() -> Self {
        LineBundlePerturbation { coeffs: [zero(); 3] }
    }

    pub fn random(seed: u64, amplitude: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut coeffs = [zero(); 3];
        for c in coeffs.iter_mut() {
            *c = C64::from_polar(amplitude * rng.gen::<f64>(), rng.gen_range(0.0..std::f64::consts::TAU));
        }
        LineBundlePerturbation { coeffs }
    }

    fn bump(s: f64) -> f64 {
        if s.abs() >= 1.0 {
            0.0
        } else {
            (1.0 - s * s).powi(3)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineBundleDims {
    pub k: i64,
    pub kernel_dim: usize,
    pub coker_dim: usize,
    pub index: i64,
}

/// Relative singular-value threshold for numerical rank.
pub const RANK_THRESHOLD: f64 = 1e-8;

/// Kernel and cokernel dimensions of `∂̄ + a` on `O(k)` over the sphere,
/// discretised on the cylinder `|s| <= 3` with angular modes `|m| <= resolution`
/// and a box scheme in `s`. Regularity at `z = 0` kills modes `m < 0` at the
/// left end; regularity of `z^{−k} f` at infinity kills modes `m > k` at the right.
pub fn line_bundle_dbar_dims(k: i64, a: &LineBundlePerturbation, resolution: usize) -> Result<LineBundleDims> {
    let big_m = resolution as i64;
    if big_m < k.abs() + 2 {
        return Err(GlueError::Resolution(format!(
            "{resolution} angular modes cannot resolve O({k}); need at least {}",
            k.abs() + 2
        )));
    }
    let ns = 48;
    let s_max = 3.0;
    let h = 2.0 * s_max / (ns - 1) as f64;
    let modes: Vec<i64> = (-big_m..=big_m).collect();
    let nm = modes.len();
    let col = |mi: usize, j: usize| mi * ns + j;
    let bc_rows: usize = modes.iter().map(|&m| (m < 0) as usize + (m > k) as usize).sum();
    let rows = nm * (ns - 1) + bc_rows;
    let mut mat = DMatrix::<C64>::zeros(rows, nm * ns);
    let mut row = 0;
    for (mi, &m) in modes.iter().enumerate() {
        for j in 0..ns - 1 {
            let sm = -s_max + (j as f64 + 0.5) * h;
            mat[(row, col(mi, j))] += C64::new(-1.0 / h - 0.5 * m as f64, 0.0);
            mat[(row, col(mi, j + 1))] += C64::new(1.0 / h - 0.5 * m as f64, 0.0);
            let bump = LineBundlePerturbation::bump(sm);
            if bump != 0.0 {
                for (li, l) in (-1i64..=1).enumerate() {
                    let src = m - l;
                    if src.abs() > big_m {
                        continue;
                    }
                    let si = (src + big_m) as usize;
                    let w = a.coeffs[li] * (0.5 * bump);
                    mat[(row, col(si, j))] += w;
                    mat[(row, col(si, j + 1))] += w;
                }
            }
            row += 1;
        }
    }
    for (mi, &m) in modes.iter().enumerate() {
        if m < 0 {
            mat[(row, col(mi, 0))] = C64::new(1.0, 0.0);
            row += 1;
        }
        if m > k {
            mat[(row, col(mi, ns - 1))] = C64::new(1.0, 0.0);
            row += 1;
        }
    }
    let sv = mat.singular_values();
    let smax = sv.iter().copied().fold(0.0, f64::max);
    let rank = sv.iter().filter(|&&v| v > RANK_THRESHOLD * smax).count();
    let kernel_dim = nm * ns - rank;
    let coker_dim = rows - rank;
    Ok(LineBundleDims { k, kernel_dim, coker_dim, index: kernel_dim as i64 - coker_dim as i64 })
}
