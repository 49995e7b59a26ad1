//! Log-polar sample grids on the neck annulus `{xy = t}` and on the nodal
//! disks, sampled fields, spectral derivatives and `L^p` / `L^p_1` norms.
//!
//! A grid always samples radii `r_inner <= r <= 1` geometrically (uniform in
//! `s = ln r`) and angles uniformly. What the samples represent depends on the
//! [`Chart`]:
//!
//! * `Disk`: a single punctured unit disk in one coordinate (`t = 0`).
//! * `Annulus`: the annulus `A_t`, stored as two halves: side 0 is
//!   `{|x| >= |y|}` in the coordinate `x`, side 1 is `{|y| >= |x|}` in the
//!   coordinate `y = t / x`. Both halves share the circle `|x| = |t|^{1/2}`.
//! * `Nodal`: the two branches `{y = 0}` and `{x = 0}` of the node, each a
//!   unit disk sampled outside the radius `|t|^{1/2}`. Inside that radius a
//!   nodal section is the holomorphic extension of its non-negative angular
//!   modes on the inner circle.
//!
//! Every quantity on a side is expressed in that side's own coordinate; forms
//! are coefficients of `dx̄` (or `dȳ`).

use std::f64::consts::PI;
use std::fmt;
use std::marker::PhantomData;
use std::sync::Arc;

use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{GlueError, Result};
use crate::numerics::{bin_of_mode, fd_weights, gauss_legendre, mode_of_bin, stencil_start, C64};
use crate::par;

/// Inner truncation radius of the punctured disk used for `t = 0`.
pub const DEFAULT_R_MIN: f64 = 1e-6;

const DERIV_WIDTH: usize = 7;
const INTERP_WIDTH: usize = 6;
const GAUSS_POINTS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Chart {
    Disk,
    Annulus,
    Nodal,
}

/// Which metric the integrals use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum NormConvention {
    /// Metric induced by the embedding `x ↦ (x, t/x)` in `C²`.
    #[default]
    Induced,
    /// Flat `|dx|²` in each side's coordinate.
    Flat,
}

/// Product-integration rule on one radial interval `[s_i, s_{i+1}]`.
#[derive(Clone)]
pub(crate) struct IntervalRule {
    pub start: usize,
    pub sigma: Vec<f64>,
    /// Gauss weight times half the interval length.
    pub weight: Vec<f64>,
    /// Lagrange weights of the stencil at each Gauss node.
    pub lagrange: Vec<[f64; INTERP_WIDTH]>,
    pub width: usize,
}

#[derive(Clone)]
pub struct AnnulusGrid {
    pub t: C64,
    pub chart: Chart,
    pub r_inner: f64,
    pub n_r: usize,
    pub n_theta: usize,
    /// Radial step in `s = ln r`.
    pub h: f64,
    pub s_levels: Vec<f64>,
    pub r_levels: Vec<f64>,
    /// Radial quadrature weights for `∫ f r dr` (angles excluded).
    pub radial_weights: Vec<f64>,
    deriv: Vec<(usize, [f64; DERIV_WIDTH])>,
    deriv_width: usize,
    pub(crate) intervals: Vec<IntervalRule>,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for AnnulusGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AnnulusGrid")
            .field("t", &self.t)
            .field("chart", &self.chart)
            .field("r_inner", &self.r_inner)
            .field("n_r", &self.n_r)
            .field("n_theta", &self.n_theta)
            .finish()
    }
}

/// Build the sample grid for gluing parameter `t`: the punctured disk when
/// `t = 0`, the annulus `A_t` otherwise.
pub fn build_annulus_grid(t: C64, n_r: usize, n_theta: usize) -> Result<AnnulusGrid> {
    if t.norm() == 0.0 {
        AnnulusGrid::new(t, Chart::Disk, n_r, n_theta, DEFAULT_R_MIN)
    } else {
        AnnulusGrid::new(t, Chart::Annulus, n_r, n_theta, DEFAULT_R_MIN)
    }
}

impl AnnulusGrid {
    /// General constructor. `r_min` is only used by the `Disk` chart.
    pub fn new(t: C64, chart: Chart, n_r: usize, n_theta: usize, r_min: f64) -> Result<Self> {
        let ta = t.norm();
        if !(ta < 1.0) || !ta.is_finite() {
            return Err(GlueError::Domain(format!("|t| = {ta} must be < 1")));
        }
        if n_r < 2 {
            return Err(GlueError::Size(format!("n_r = {n_r} must be at least 2")));
        }
        if n_theta < 8 || !n_theta.is_power_of_two() {
            return Err(GlueError::Size(format!("n_theta = {n_theta} must be a power of two and at least 8")));
        }
        let r_inner = match chart {
            Chart::Disk => {
                if ta != 0.0 {
                    return Err(GlueError::Domain("disk chart requires t = 0".into()));
                }
                if !(r_min > 0.0 && r_min < 1.0) {
                    return Err(GlueError::Domain(format!("r_min = {r_min} must lie in (0,1)")));
                }
                r_min
            }
            Chart::Annulus | Chart::Nodal => {
                if ta == 0.0 {
                    return Err(GlueError::Domain("annulus and nodal charts require t != 0".into()));
                }
                ta.sqrt()
            }
        };
        let s_in = r_inner.ln();
        let h = -s_in / (n_r - 1) as f64;
        let s_levels: Vec<f64> = (0..n_r).map(|j| if j + 1 == n_r { 0.0 } else { s_in + j as f64 * h }).collect();
        let r_levels: Vec<f64> = s_levels.iter().map(|s| s.exp()).collect();

        let deriv_width = DERIV_WIDTH.min(n_r);
        let deriv = (0..n_r)
            .map(|j| {
                let start = stencil_start(j as isize, deriv_width, n_r);
                let nodes: Vec<f64> = (0..deriv_width).map(|l| (start + l) as f64 - j as f64).collect();
                let w = fd_weights(0.0, &nodes, 1);
                let mut stencil = [0.0; DERIV_WIDTH];
                for l in 0..deriv_width {
                    stencil[l] = w[1][l] / h;
                }
                (start, stencil)
            })
            .collect();

        let width = INTERP_WIDTH.min(n_r);
        let (gx, gw) = gauss_legendre(GAUSS_POINTS);
        let intervals: Vec<IntervalRule> = (0..n_r - 1)
            .map(|i| {
                // centre the stencil on the interval midpoint
                let start = ((i as isize) - (width as isize / 2 - 1)).clamp(0, n_r as isize - width as isize) as usize;
                let a = s_levels[i];
                let b = s_levels[i + 1];
                let half = 0.5 * (b - a);
                let mid = 0.5 * (a + b);
                let nodes: Vec<f64> = (0..width).map(|l| s_levels[start + l]).collect();
                let mut sigma = Vec::with_capacity(GAUSS_POINTS);
                let mut weight = Vec::with_capacity(GAUSS_POINTS);
                let mut lagrange = Vec::with_capacity(GAUSS_POINTS);
                for (x, w) in gx.iter().zip(&gw) {
                    let sg = mid + half * x;
                    sigma.push(sg);
                    weight.push(w * half);
                    let lw = fd_weights(sg, &nodes, 0);
                    let mut l6 = [0.0; INTERP_WIDTH];
                    l6[..width].copy_from_slice(&lw[0][..width]);
                    lagrange.push(l6);
                }
                IntervalRule { start, sigma, weight, lagrange, width }
            })
            .collect();

        let mut radial_weights = vec![0.0; n_r];
        for rule in &intervals {
            for g in 0..rule.sigma.len() {
                let jac = (2.0 * rule.sigma[g]).exp() * rule.weight[g];
                for l in 0..rule.width {
                    radial_weights[rule.start + l] += jac * rule.lagrange[g][l];
                }
            }
        }

        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(n_theta);
        let ifft = planner.plan_fft_inverse(n_theta);
        Ok(AnnulusGrid {
            t,
            chart,
            r_inner,
            n_r,
            n_theta,
            h,
            s_levels,
            r_levels,
            radial_weights,
            deriv,
            deriv_width,
            intervals,
            fft,
            ifft,
        })
    }

    /// Grid of the nodal model (both branches) matching the annulus grid of
    /// the same `t` sample for sample.
    pub fn nodal(t: C64, n_r: usize, n_theta: usize) -> Result<Self> {
        Self::new(t, Chart::Nodal, n_r, n_theta, DEFAULT_R_MIN)
    }

    /// Same radial and angular sampling, different chart.
    pub fn with_chart(&self, chart: Chart) -> Result<Self> {
        Self::new(self.t, chart, self.n_r, self.n_theta, self.r_inner)
    }

    /// Pick `n_r` so that the radial step in `ln r` is at most `h_max`.
    pub fn for_step(t: C64, chart: Chart, h_max: f64, n_theta: usize) -> Result<Self> {
        let r_inner = if t.norm() == 0.0 { DEFAULT_R_MIN } else { t.norm().sqrt() };
        let n_r = ((-r_inner.ln()) / h_max).ceil() as usize + 1;
        Self::new(t, chart, n_r.max(8), n_theta, r_inner)
    }

    pub fn sides(&self) -> usize {
        match self.chart {
            Chart::Disk => 1,
            Chart::Annulus | Chart::Nodal => 2,
        }
    }

    pub fn theta(&self, k: usize) -> f64 {
        2.0 * PI * k as f64 / self.n_theta as f64
    }

    /// Chart coordinate of sample `(j, k)` on its own side.
    pub fn point(&self, j: usize, k: usize) -> C64 {
        C64::from_polar(self.r_levels[j], self.theta(k))
    }

    /// Metric factor at radius index `j` for the given convention.
    pub fn metric_at(&self, j: usize, convention: NormConvention) -> f64 {
        match (self.chart, convention) {
            (Chart::Annulus, NormConvention::Induced) => {
                let r = self.r_levels[j];
                1.0 + self.t.norm_sqr() / r.powi(4)
            }
            _ => 1.0,
        }
    }

    /// Quadrature weight of a single sample (flat area element).
    pub fn sample_weight(&self, j: usize) -> f64 {
        self.radial_weights[j] * 2.0 * PI / self.n_theta as f64
    }

    /// Metric area of one side.
    pub fn side_area(&self, convention: NormConvention) -> f64 {
        (0..self.n_r).map(|j| self.radial_weights[j] * self.metric_at(j, convention)).sum::<f64>() * 2.0 * PI
    }

    pub fn same_sampling(&self, other: &AnnulusGrid) -> bool {
        self.chart == other.chart && self.same_points(other)
    }

    /// Same sample points, whatever the chart.
    pub fn same_points(&self, other: &AnnulusGrid) -> bool {
        self.n_r == other.n_r
            && self.n_theta == other.n_theta
            && (self.t - other.t).norm() == 0.0
            && self.r_inner == other.r_inner
    }

    /// Derivative in `s` of every row group `[j][..n_theta]` of one component
    /// block, written into `out`.
    fn ds_block(&self, block: &[C64], out: &mut [C64]) {
        let nt = self.n_theta;
        for j in 0..self.n_r {
            let (start, w) = &self.deriv[j];
            let row = &mut out[j * nt..(j + 1) * nt];
            row.iter_mut().for_each(|v| *v = C64::new(0.0, 0.0));
            for l in 0..self.deriv_width {
                let src = &block[(start + l) * nt..(start + l + 1) * nt];
                let wl = w[l];
                for (o, s) in row.iter_mut().zip(src) {
                    *o += s * wl;
                }
            }
        }
    }
}

/// `1 + |t|²/|x|⁴`: area factor of the metric induced on `A_t` by the
/// embedding `x ↦ (x, t/x)`.
pub fn metric_weight(x: C64, t: C64) -> Result<f64> {
    let r = x.norm();
    if r == 0.0 {
        return Err(GlueError::Singular("metric_weight at x = 0".into()));
    }
    Ok(1.0 + t.norm_sqr() / r.powi(4))
}

/// Samples of `n` complex components on every side of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub n: usize,
    pub n_r: usize,
    pub n_theta: usize,
    /// Layout `[component][radius][angle]`.
    pub data: Vec<C64>,
}

impl Field {
    pub fn zeros(n: usize, n_r: usize, n_theta: usize) -> Self {
        Field { n, n_r, n_theta, data: vec![C64::new(0.0, 0.0); n * n_r * n_theta] }
    }

    #[inline]
    pub fn idx(&self, c: usize, j: usize, k: usize) -> usize {
        (c * self.n_r + j) * self.n_theta + k
    }

    #[inline]
    pub fn get(&self, c: usize, j: usize, k: usize) -> C64 {
        self.data[self.idx(c, j, k)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, j: usize, k: usize, v: C64) {
        let i = self.idx(c, j, k);
        self.data[i] = v;
    }

    /// Angular Fourier coefficients per row (normalised so that
    /// `f = Σ_m coeff_m e^{imθ}`).
    pub fn to_modes(&self, grid: &AnnulusGrid) -> Field {
        let mut out = self.clone();
        let nt = self.n_theta;
        let scale = 1.0 / nt as f64;
        let fft = grid.fft.clone();
        par::for_each_chunk_mut(&mut out.data, nt, |_, row| {
            fft.process(row);
            row.iter_mut().for_each(|v| *v *= scale);
        });
        out
    }

    pub fn from_modes(&self, grid: &AnnulusGrid) -> Field {
        let mut out = self.clone();
        let ifft = grid.ifft.clone();
        par::for_each_chunk_mut(&mut out.data, self.n_theta, |_, row| ifft.process(row));
        out
    }

    fn check(&self, other: &Field) {
        assert_eq!(self.data.len(), other.data.len(), "field shapes differ");
    }
}

/// Degree marker: maps are functions, forms carry one differential.
pub trait FormDegree: Clone + Send + Sync + 'static {
    const DEGREE: i32;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapKind;
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FormKind;

impl FormDegree for MapKind {
    const DEGREE: i32 = 0;
}
impl FormDegree for FormKind {
    const DEGREE: i32 = 1;
}

/// Sampled `Cⁿ`-valued data on every side of a grid.
#[derive(Debug, Clone)]
pub struct Sampled<K> {
    pub grid: Arc<AnnulusGrid>,
    pub n: usize,
    pub sides: Vec<Field>,
    _kind: PhantomData<K>,
}

/// Sampled maps `A_t → Cⁿ`, also used for sections of the pulled-back
/// tangent bundle (the chart's exponential map is vector addition).
pub type MapSample = Sampled<MapKind>;
/// Sampled `(0,1)`-forms `g dx̄` (and, by abuse, `(1,0)`-forms `g dx`).
pub type ZeroOneForm = Sampled<FormKind>;

impl<K: FormDegree> Sampled<K> {
    pub fn zeros(grid: Arc<AnnulusGrid>, n: usize) -> Self {
        let sides = (0..grid.sides()).map(|_| Field::zeros(n, grid.n_r, grid.n_theta)).collect();
        Sampled { grid, n, sides, _kind: PhantomData }
    }

    pub fn from_sides(grid: Arc<AnnulusGrid>, n: usize, sides: Vec<Field>) -> Result<Self> {
        if sides.len() != grid.sides()
            || sides.iter().any(|f| f.n != n || f.n_r != grid.n_r || f.n_theta != grid.n_theta)
        {
            return Err(GlueError::Shape("side fields do not match the grid".into()));
        }
        Ok(Sampled { grid, n, sides, _kind: PhantomData })
    }

    /// Sample `f(side, z)` where `z` is the side's own coordinate.
    pub fn from_fn(grid: Arc<AnnulusGrid>, n: usize, f: impl Fn(usize, C64) -> Vec<C64> + Sync) -> Self {
        let mut out = Self::zeros(grid.clone(), n);
        for (side, field) in out.sides.iter_mut().enumerate() {
            let nt = grid.n_theta;
            let nr = grid.n_r;
            let values: Vec<Vec<C64>> = par::map_range(nr * nt, |i| f(side, grid.point(i / nt, i % nt)));
            for (i, v) in values.iter().enumerate() {
                for c in 0..n {
                    field.set(c, i / nt, i % nt, v[c]);
                }
            }
        }
        out
    }

    pub fn same_shape<L>(&self, other: &Sampled<L>) -> bool {
        self.n == other.n && self.grid.same_sampling(&other.grid)
    }

    pub fn ensure_shape<L>(&self, other: &Sampled<L>) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(GlueError::Shape("operands live on different grids".into()))
        }
    }

    /// Reinterpret the data with another degree marker.
    pub fn cast<L: FormDegree>(self) -> Sampled<L> {
        Sampled { grid: self.grid, n: self.n, sides: self.sides, _kind: PhantomData }
    }

    /// Same data on a grid with identical sampling but another chart.
    pub fn rechart(&self, grid: Arc<AnnulusGrid>) -> Result<Self> {
        if !grid.same_points(&self.grid) || grid.sides() != self.sides.len() {
            return Err(GlueError::Shape("cannot move samples to a differently sampled grid".into()));
        }
        Ok(Sampled { grid, n: self.n, sides: self.sides.clone(), _kind: PhantomData })
    }

    pub fn scale(&self, a: C64) -> Self {
        let mut out = self.clone();
        out.sides.iter_mut().for_each(|f| f.data.iter_mut().for_each(|v| *v *= a));
        out
    }

    /// `self + a * other`.
    pub fn axpy(&self, a: C64, other: &Self) -> Self {
        let mut out = self.clone();
        for (f, g) in out.sides.iter_mut().zip(&other.sides) {
            f.check(g);
            f.data.iter_mut().zip(&g.data).for_each(|(u, v)| *u += a * v);
        }
        out
    }

    pub fn add(&self, other: &Self) -> Self {
        self.axpy(C64::new(1.0, 0.0), other)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.axpy(C64::new(-1.0, 0.0), other)
    }

    pub fn is_finite(&self) -> bool {
        self.sides.iter().all(|f| f.data.iter().all(|v| v.re.is_finite() && v.im.is_finite()))
    }

    /// Value vector at a sample.
    pub fn at(&self, side: usize, j: usize, k: usize) -> Vec<C64> {
        (0..self.n).map(|c| self.sides[side].get(c, j, k)).collect()
    }

    /// Apply a pointwise map to the `n`-vector at every sample.
    pub fn map_pointwise<L: FormDegree>(
        &self,
        n_out: usize,
        f: impl Fn(usize, usize, usize, &[C64]) -> Vec<C64> + Sync,
    ) -> Sampled<L> {
        let g = &self.grid;
        let (nr, nt) = (g.n_r, g.n_theta);
        let sides = self
            .sides
            .iter()
            .enumerate()
            .map(|(side, field)| {
                let vals: Vec<Vec<C64>> = par::map_range(nr * nt, |i| {
                    let (j, k) = (i / nt, i % nt);
                    let v: Vec<C64> = (0..self.n).map(|c| field.get(c, j, k)).collect();
                    f(side, j, k, &v)
                });
                let mut out = Field::zeros(n_out, nr, nt);
                for (i, v) in vals.iter().enumerate() {
                    for c in 0..n_out {
                        out.set(c, i / nt, i % nt, v[c]);
                    }
                }
                out
            })
            .collect();
        Sampled { grid: self.grid.clone(), n: n_out, sides, _kind: PhantomData }
    }

    /// Angular Fourier coefficients on every side.
    pub fn modes(&self) -> Vec<Field> {
        self.sides.iter().map(|f| f.to_modes(&self.grid)).collect()
    }

    pub fn from_mode_sides(grid: Arc<AnnulusGrid>, n: usize, modes: &[Field]) -> Self {
        let sides = modes.iter().map(|m| m.from_modes(&grid)).collect();
        Sampled { grid, n, sides, _kind: PhantomData }
    }

    /// Masked `L²` inner product `∫ ⟨self, other⟩` (antilinear in `self`).
    /// Euclidean real inner product `Σ Re(ā b)` over all samples.
    pub fn real_dot(&self, other: &Self) -> f64 {
        self.sides
            .iter()
            .zip(&other.sides)
            .map(|(a, b)| a.data.iter().zip(&b.data).map(|(x, y)| x.re * y.re + x.im * y.im).sum::<f64>())
            .sum()
    }

    pub fn inner(&self, other: &Self, convention: NormConvention, mask: Option<&Mask>) -> C64 {
        let g = &self.grid;
        let mut acc = C64::new(0.0, 0.0);
        for side in 0..self.sides.len() {
            for j in 0..g.n_r {
                let lam = g.metric_at(j, convention);
                let w = g.sample_weight(j) * lam.powf(1.0 - K::DEGREE as f64);
                for k in 0..g.n_theta {
                    if let Some(m) = mask {
                        if !m(side, g.r_levels[j], g.theta(k)) {
                            continue;
                        }
                    }
                    for c in 0..self.n {
                        acc += self.sides[side].get(c, j, k).conj() * other.sides[side].get(c, j, k) * w;
                    }
                }
            }
        }
        acc
    }
}

/// Region selector `(side, r, theta) -> included`.
pub type Mask = dyn Fn(usize, f64, f64) -> bool + Sync;

/// `L^p` norm for any `p >= 1` (or `p = ∞`), optionally restricted to a mask.
pub fn lp_norm_with<K: FormDegree>(f: &Sampled<K>, p: f64, convention: NormConvention, mask: Option<&Mask>) -> f64 {
    let g = &f.grid;
    let deg = K::DEGREE as f64;
    let mut acc = 0.0f64;
    for (side, field) in f.sides.iter().enumerate() {
        for j in 0..g.n_r {
            let lam = g.metric_at(j, convention);
            let pointwise_scale = lam.powf(-0.5 * deg);
            let w = g.sample_weight(j) * lam;
            for k in 0..g.n_theta {
                if let Some(m) = mask {
                    if !m(side, g.r_levels[j], g.theta(k)) {
                        continue;
                    }
                }
                let mut sq = 0.0;
                for c in 0..f.n {
                    sq += field.get(c, j, k).norm_sqr();
                }
                let v = sq.sqrt() * pointwise_scale;
                if p.is_infinite() {
                    acc = acc.max(v);
                } else {
                    acc += w * v.powf(p);
                }
            }
        }
    }
    if p.is_infinite() {
        acc
    } else {
        acc.powf(1.0 / p)
    }
}

fn check_exponent(p: f64) -> Result<()> {
    if p > 2.0 && p.is_finite() {
        Ok(())
    } else {
        Err(GlueError::Domain(format!("p = {p} must lie in (2, ∞)")))
    }
}

/// `L^p` norm with the induced metric; `p` must lie in `(2, ∞)`.
pub fn lp_norm<K: FormDegree>(f: &Sampled<K>, p: f64) -> Result<f64> {
    check_exponent(p)?;
    Ok(lp_norm_with(f, p, NormConvention::Induced, None))
}

/// `L^p_1` norm: `‖f‖ + ‖∂f‖ + ‖∂̄f‖`.
pub fn l1p_norm(f: &MapSample, p: f64) -> Result<f64> {
    check_exponent(p)?;
    Ok(l1p_norm_with(f, p, NormConvention::Induced, None))
}

pub fn l1p_norm_with(f: &MapSample, p: f64, convention: NormConvention, mask: Option<&Mask>) -> f64 {
    lp_norm_with(f, p, convention, mask)
        + lp_norm_with(&del(f), p, convention, mask)
        + lp_norm_with(&dbar(f), p, convention, mask)
}

/// Highest angular mode kept by the derivative operators.
pub fn mode_limit(n_theta: usize) -> i64 {
    (n_theta / 2) as i64 - 2
}

/// Shared kernel of `∂̄` (`shift = +1`) and `∂` (`shift = -1`) on one side:
/// mode `m` maps to mode `m + shift` with profile `(f_m' − shift·m f_m)/(2r)`.
fn cr_derivative(grid: &AnnulusGrid, modes: &Field, shift: i64) -> Field {
    let (nr, nt) = (grid.n_r, grid.n_theta);
    let limit = mode_limit(nt);
    let mut out = Field::zeros(modes.n, nr, nt);
    let block = nr * nt;
    for c in 0..modes.n {
        let src = &modes.data[c * block..(c + 1) * block];
        let mut ds = vec![C64::new(0.0, 0.0); block];
        grid.ds_block(src, &mut ds);
        let dst = &mut out.data[c * block..(c + 1) * block];
        for j in 0..nr {
            let inv = 0.5 / grid.r_levels[j];
            for b in 0..nt {
                let m = mode_of_bin(b, nt);
                let target = m + shift;
                if m.abs() > limit || target.abs() > limit {
                    continue;
                }
                let tb = bin_of_mode(target, nt).expect("mode within band");
                dst[j * nt + tb] = (ds[j * nt + b] - src[j * nt + b] * (shift * m) as f64) * inv;
            }
        }
    }
    out
}

/// `∂̄f` on every side, in that side's coordinate.
pub fn dbar(f: &MapSample) -> ZeroOneForm {
    let modes = f.modes();
    let out: Vec<Field> = modes.iter().map(|m| cr_derivative(&f.grid, m, 1)).collect();
    ZeroOneForm::from_mode_sides(f.grid.clone(), f.n, &out)
}

/// `∂f` on every side, as the coefficient of `dx`.
pub fn del(f: &MapSample) -> ZeroOneForm {
    let modes = f.modes();
    let out: Vec<Field> = modes.iter().map(|m| cr_derivative(&f.grid, m, -1)).collect();
    ZeroOneForm::from_mode_sides(f.grid.clone(), f.n, &out)
}

/// The cutoff `ρ`: `0` for `s <= 1`, `1` for `s >= 2`, the quintic
/// smoothstep `6u⁵ − 15u⁴ + 10u³` (`u = s − 1`) in between. Class `C²`.
#[derive(Debug, Clone, Copy, Default)]
pub struct CutoffProfile;

impl CutoffProfile {
    pub fn rho(&self, s: f64) -> f64 {
        if s <= 1.0 {
            0.0
        } else if s >= 2.0 {
            1.0
        } else {
            let u = s - 1.0;
            u * u * u * (10.0 + u * (-15.0 + 6.0 * u))
        }
    }

    pub fn rho_prime(&self, s: f64) -> f64 {
        if s <= 1.0 || s >= 2.0 {
            0.0
        } else {
            let u = s - 1.0;
            30.0 * u * u * (1.0 - u) * (1.0 - u)
        }
    }
}

/// `β_δ(z) = ρ(4 ln|z| / ln δ)`; equals 1 for `|z| <= δ^{1/2}` and 0 for
/// `|z| >= δ^{1/4}`. At `z = 0` the limit value 1 is returned.
pub fn beta_cutoff(delta: f64, z: C64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(GlueError::Domain(format!("delta = {delta} must lie in (0,1)")));
    }
    let r = z.norm();
    if r == 0.0 {
        return Ok(1.0);
    }
    Ok(CutoffProfile.rho(4.0 * r.ln() / delta.ln()))
}

/// Radial derivative `dβ_δ/dr` at radius `r`.
pub fn beta_radial_derivative(delta: f64, r: f64) -> f64 {
    let ld = delta.ln();
    CutoffProfile.rho_prime(4.0 * r.ln() / ld) * 4.0 / (r * ld)
}

/// Quadrature value of `∫_C |∇β_δ|^p |z|^{p−2} dσ`, integrated in polar
/// coordinates over the transition band `δ^{1/2} <= |z| <= δ^{1/4}`.
pub fn beta_gradient_integral(delta: f64, p: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(GlueError::Domain(format!("delta = {delta} must lie in (0,1)")));
    }
    check_exponent(p)?;
    let (gx, gw) = gauss_legendre(16);
    let s_lo = 0.5 * delta.ln();
    let s_hi = 0.25 * delta.ln();
    let panels = 64;
    let hs = (s_hi - s_lo) / panels as f64;
    let mut acc = 0.0;
    for panel in 0..panels {
        let a = s_lo + panel as f64 * hs;
        for (x, w) in gx.iter().zip(&gw) {
            let s = a + 0.5 * hs * (x + 1.0);
            let r = s.exp();
            let grad = beta_radial_derivative(delta, r).abs();
            // dσ = 2π r dr = 2π r² ds
            acc += 0.5 * hs * w * grad.powf(p) * r.powf(p - 2.0) * r * r;
        }
    }
    Ok(2.0 * PI * acc)
}

/// Serialized form of a sampled field.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SampleEnvelope {
    pub t_re: f64,
    pub t_im: f64,
    pub n_r: usize,
    pub n_theta: usize,
    pub chart: Chart,
    pub r_inner: f64,
    pub components: usize,
    /// `[re, im]` pairs in `[side][component][radius][angle]` order.
    pub values: Vec<[f64; 2]>,
}

impl<K: FormDegree> Sampled<K> {
    pub fn to_envelope(&self) -> SampleEnvelope {
        let values = self.sides.iter().flat_map(|f| f.data.iter().map(|v| [v.re, v.im])).collect();
        SampleEnvelope {
            t_re: self.grid.t.re,
            t_im: self.grid.t.im,
            n_r: self.grid.n_r,
            n_theta: self.grid.n_theta,
            chart: self.grid.chart,
            r_inner: self.grid.r_inner,
            components: self.n,
            values,
        }
    }

    pub fn from_envelope(env: &SampleEnvelope) -> Result<Self> {
        let grid =
            Arc::new(AnnulusGrid::new(C64::new(env.t_re, env.t_im), env.chart, env.n_r, env.n_theta, env.r_inner)?);
        let per_side = env.components * env.n_r * env.n_theta;
        if env.values.len() != per_side * grid.sides() {
            return Err(GlueError::Shape(format!(
                "envelope holds {} values, expected {}",
                env.values.len(),
                per_side * grid.sides()
            )));
        }
        let sides = env
            .values
            .chunks(per_side)
            .map(|chunk| Field {
                n: env.components,
                n_r: env.n_r,
                n_theta: env.n_theta,
                data: chunk.iter().map(|v| C64::new(v[0], v[1])).collect(),
            })
            .collect();
        Sampled::from_sides(grid, env.components, sides)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn disk(n_r: usize, n_theta: usize) -> Arc<AnnulusGrid> {
        Arc::new(build_annulus_grid(C64::new(0.0, 0.0), n_r, n_theta).unwrap())
    }

    #[test]
    fn annulus_grid_radii_span_half_annulus() {
        let g = build_annulus_grid(C64::new(0.01, 0.0), 32, 64).unwrap();
        assert_eq!(g.chart, Chart::Annulus);
        assert_relative_eq!(g.r_levels[0], 0.1, max_relative = 1e-14);
        assert_eq!(g.r_levels[31], 1.0);
        assert!(g.r_levels.iter().all(|&r| (0.1 - 1e-15..=1.0).contains(&r)));
        assert!(g.radial_weights.iter().all(|&w| w > 0.0));
    }

    #[test]
    fn nodal_limit_grid_is_punctured_disk() {
        let g = build_annulus_grid(C64::new(0.0, 0.0), 32, 64).unwrap();
        assert_eq!(g.chart, Chart::Disk);
        assert_relative_eq!(g.r_levels[0], DEFAULT_R_MIN, max_relative = 1e-12);
        assert_eq!(g.sides(), 1);
    }

    #[test]
    fn grid_rejects_bad_parameters() {
        assert!(matches!(build_annulus_grid(C64::new(1.5, 0.0), 32, 64), Err(GlueError::Domain(_))));
        assert!(matches!(build_annulus_grid(C64::new(0.01, 0.0), 1, 64), Err(GlueError::Size(_))));
        assert!(matches!(build_annulus_grid(C64::new(0.01, 0.0), 16, 48), Err(GlueError::Size(_))));
        assert!(matches!(build_annulus_grid(C64::new(0.01, 0.0), 16, 4), Err(GlueError::Size(_))));
    }

    #[test]
    fn half_annulus_area_matches_closed_form() {
        for &ta in &[1e-2, 1e-4] {
            let g = AnnulusGrid::for_step(C64::new(ta, 0.0), Chart::Annulus, 0.02, 16).unwrap();
            let exact = PI * (1.0 - ta * ta);
            assert_relative_eq!(g.side_area(NormConvention::Induced), exact, max_relative = 1e-6);
        }
    }

    #[test]
    fn metric_weight_values() {
        let t = C64::new(0.01, 0.0);
        assert_relative_eq!(metric_weight(C64::new(0.6, 0.8), t).unwrap(), 1.0001, max_relative = 1e-14);
        assert_relative_eq!(metric_weight(C64::new(0.1, 0.0), t).unwrap(), 2.0, max_relative = 1e-14);
        assert_eq!(metric_weight(C64::new(0.3, 0.2), C64::new(0.0, 0.0)).unwrap(), 1.0);
        assert!(matches!(metric_weight(C64::new(0.0, 0.0), t), Err(GlueError::Singular(_))));
    }

    #[test]
    fn full_annulus_area_agrees_between_charts() {
        // The x-chart sees the whole annulus |t| <= |x| <= 1; the two stored
        // halves must add up to the same metric area.
        let ta = 1e-2;
        let half = AnnulusGrid::for_step(C64::new(ta, 0.0), Chart::Annulus, 0.01, 16).unwrap();
        let full = AnnulusGrid::new(C64::new(0.0, 0.0), Chart::Disk, 2 * half.n_r - 1, 16, ta).unwrap();
        let full_area: f64 =
            (0..full.n_r).map(|j| full.radial_weights[j] * (1.0 + ta * ta / full.r_levels[j].powi(4))).sum::<f64>()
                * 2.0
                * PI;
        assert_relative_eq!(full_area, 2.0 * half.side_area(NormConvention::Induced), max_relative = 1e-6);
    }

    #[test]
    fn quadrature_integrates_low_modes() {
        // ∫ r^3 cos^2(θ) over annulus r ∈ [0.1, 1]: π (1 − 0.1^5)/5
        let g = Arc::new(AnnulusGrid::for_step(C64::new(0.01, 0.0), Chart::Annulus, 0.01, 16).unwrap());
        let f =
            MapSample::from_fn(g.clone(), 1, |_, z| vec![C64::new(z.norm().powi(3) * (z.arg().cos()).powi(2), 0.0)]);
        let integral: f64 = (0..g.n_r)
            .flat_map(|j| (0..g.n_theta).map(move |k| (j, k)))
            .map(|(j, k)| g.sample_weight(j) * f.sides[0].get(0, j, k).re)
            .sum();
        assert_relative_eq!(integral, PI * (1.0 - 1e-5) / 5.0, max_relative = 1e-8);
    }

    #[test]
    fn lp_norm_of_constant_on_disk() {
        let g = disk(64, 16);
        let one = MapSample::from_fn(g.clone(), 1, |_, _| vec![C64::new(1.0, 0.0)]);
        let n1 = lp_norm(&one, 4.0).unwrap();
        assert!((n1 - PI.powf(0.25)).abs() < 1e-4);
        let two = one.scale(C64::new(2.0, 0.0));
        assert_relative_eq!(lp_norm(&two, 4.0).unwrap(), 2.0 * n1, max_relative = 1e-14);
        assert_eq!(lp_norm(&MapSample::zeros(g, 1), 4.0).unwrap(), 0.0);
        assert!(matches!(lp_norm(&one, 2.0), Err(GlueError::Domain(_))));
    }

    #[test]
    fn l1p_norm_of_identity_map() {
        let g = disk(96, 16);
        let x = MapSample::from_fn(g.clone(), 1, |_, z| vec![z]);
        let one = MapSample::from_fn(g.clone(), 1, |_, _| vec![C64::new(1.0, 0.0)]);
        let expected = lp_norm(&x, 4.0).unwrap() + lp_norm(&one, 4.0).unwrap();
        assert!((l1p_norm(&x, 4.0).unwrap() - expected).abs() < 1e-3);
        assert_relative_eq!(l1p_norm(&one, 4.0).unwrap(), lp_norm(&one, 4.0).unwrap(), max_relative = 1e-10);
        assert_relative_eq!(
            l1p_norm(&x.scale(C64::new(2.0, 0.0)), 4.0).unwrap(),
            2.0 * l1p_norm(&x, 4.0).unwrap(),
            max_relative = 1e-12
        );
    }

    fn monomial_derivative_error(h: f64) -> f64 {
        let g = Arc::new(AnnulusGrid::for_step(C64::new(1e-2, 0.0), Chart::Annulus, h, 32).unwrap());
        // f = x^2 x̄ : ∂̄f = x^2, ∂f = 2 x x̄
        let f = MapSample::from_fn(g.clone(), 1, |_, z| vec![z * z * z.conj()]);
        let db = dbar(&f);
        let d = del(&f);
        let mut err: f64 = 0.0;
        for j in 0..g.n_r {
            for k in 0..g.n_theta {
                let z = g.point(j, k);
                err = err.max((db.sides[0].get(0, j, k) - z * z).norm());
                err = err.max((d.sides[0].get(0, j, k) - 2.0 * z * z.conj()).norm());
            }
        }
        err
    }

    #[test]
    fn derivatives_of_monomials_converge() {
        let coarse = monomial_derivative_error(0.05);
        let fine = monomial_derivative_error(0.025);
        assert!(coarse < 1e-5, "coarse error {coarse}");
        assert!(coarse / fine > 16.0, "order too low: {coarse} / {fine}");
    }

    #[test]
    fn cutoff_profile_plateaus() {
        let rho = CutoffProfile;
        assert_eq!(rho.rho(0.5), 0.0);
        assert_eq!(rho.rho(1.0), 0.0);
        assert_eq!(rho.rho(2.0), 1.0);
        assert_eq!(rho.rho(7.0), 1.0);
        assert_relative_eq!(rho.rho(1.5), 0.5, max_relative = 1e-14);
        // derivative agrees with finite differences
        for &s in &[1.1, 1.37, 1.8] {
            let fd = (rho.rho(s + 1e-6) - rho.rho(s - 1e-6)) / 2e-6;
            assert!((fd - rho.rho_prime(s)).abs() < 1e-8);
        }
    }

    #[test]
    fn beta_cutoff_examples() {
        assert_eq!(beta_cutoff(1e-4, C64::new(1e-3, 0.0)).unwrap(), 1.0);
        assert_eq!(beta_cutoff(1e-4, C64::new(0.5, 0.0)).unwrap(), 0.0);
        let mid = beta_cutoff(1e-4, C64::new(10f64.powf(-1.5), 0.0)).unwrap();
        assert!(mid > 0.0 && mid < 1.0);
        assert_eq!(beta_cutoff(1e-4, C64::new(0.0, 0.0)).unwrap(), 1.0);
        assert!(beta_cutoff(1.0, C64::new(0.1, 0.0)).is_err());
    }

    #[test]
    fn beta_integral_matches_closed_reduction() {
        // Independent route: substituting u = 4 ln r / ln δ reduces the
        // integral to 2π (4/|ln δ|)^{p−1} ∫_1^2 |ρ'(u)|^p du, evaluated here
        // by composite Simpson.
        let simpson = |p: f64| {
            let n = 4000;
            let h = 1.0 / n as f64;
            (0..=n)
                .map(|i| {
                    let u = 1.0 + i as f64 * h;
                    let w = if i == 0 || i == n {
                        1.0
                    } else if i % 2 == 1 {
                        4.0
                    } else {
                        2.0
                    };
                    w * CutoffProfile.rho_prime(u).abs().powf(p)
                })
                .sum::<f64>()
                * h
                / 3.0
        };
        for &p in &[3.0, 4.0] {
            let inner = simpson(p);
            for &delta in &[1e-2f64, 1e-6] {
                let expected = 2.0 * PI * (4.0 / delta.ln().abs()).powf(p - 1.0) * inner;
                assert_relative_eq!(beta_gradient_integral(delta, p).unwrap(), expected, max_relative = 1e-8);
            }
        }
    }

    #[test]
    fn envelope_roundtrip() {
        let g = Arc::new(build_annulus_grid(C64::new(0.01, 0.02), 12, 8).unwrap());
        let f = MapSample::from_fn(g, 2, |s, z| vec![z + s as f64, z.conj()]);
        let json = serde_json::to_string(&f.to_envelope()).unwrap();
        let back = MapSample::from_envelope(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back.sides, f.sides);
    }
}
