use std::sync::Arc;

use nodalglue::cauchy_ops::boundary_modes;
use nodalglue::geometry::{dbar, l1p_norm_with, lp_norm_with, AnnulusGrid, Chart, MapSample, NormConvention};
use nodalglue::gluing::*;
use nodalglue::linearized::{dbar_perturbed, ACStructure};
use nodalglue::numerics::fit_slope;
use nodalglue::{GlueError, C64};
use proptest::prelude::*;

fn c(re: f64) -> C64 {
    C64::new(re, 0.0)
}

fn annulus(t: f64, h: f64, nt: usize) -> Arc<AnnulusGrid> {
    GridSpec::Step { h, n_theta: nt }.grid(c(t), Chart::Annulus).unwrap()
}

fn sup(f: &MapSample) -> f64 {
    lp_norm_with(f, f64::INFINITY, NormConvention::Flat, None)
}

/// Tolerances reachable at `h = 0.05`, where the discretization floor sits
/// near `1e-7`.
fn coarse() -> NewtonOptions {
    let mut o = NewtonOptions { tol: 1e-6, floor: 1e-6, ..Default::default() };
    o.neumann.tol = 1e-8;
    o.neumann.floor = 1e-6;
    o
}

fn exact_linear(grid: Arc<AnnulusGrid>) -> MapSample {
    let t = grid.t;
    MapSample::from_fn(grid, 2, move |side, z| if side == 0 { vec![z, t / z] } else { vec![t / z, z] })
}

#[test]
fn preglue_w_plateaus() {
    let node = NodeModel::linear();
    let t = C64::from_polar(1e-4, 0.7);
    let grid = Arc::new(AnnulusGrid::for_step(t, Chart::Annulus, 0.05, 16).unwrap());
    let w = preglue_w(&node, grid.clone()).unwrap();
    let tau = t.norm().powf(0.25);
    for side in 0..2 {
        for j in 0..grid.n_r {
            let r = grid.r_levels[j];
            for k in 0..grid.n_theta {
                let z = grid.point(j, k);
                let v = w.at(side, j, k);
                if r >= 2.0 * tau {
                    let mut e = vec![c(0.0); 2];
                    e[side] = z;
                    assert_eq!(v, e);
                }
                if r <= tau {
                    assert_eq!(v, vec![c(0.0); 2]);
                }
            }
        }
    }
}

#[test]
fn preglue_w_nodal_limit() {
    let node = NodeModel::linear();
    // the sample nearest x = 0.5 sits on the plateau once 2|t|^{1/4} <= 0.5
    for t in [1e-2, 1e-3, 1e-4] {
        let grid = annulus(t, 0.05, 16);
        let w = preglue_w(&node, grid.clone()).unwrap();
        let j = grid.r_levels.iter().position(|&r| r >= 0.5).unwrap();
        let x = grid.point(j, 3);
        let err = (w.at(0, j, 3)[0] - x).norm();
        if 2.0 * t.powf(0.25) <= grid.r_levels[j] {
            assert_eq!(err, 0.0);
        } else {
            assert!(err > 0.0);
        }
    }
}

#[test]
fn preglue_rejects_large_t() {
    let spec = GridSpec::Step { h: 0.05, n_theta: 16 };
    assert!(matches!(spec.grid(c(1.0), Chart::Annulus), Err(GlueError::Domain(_))));
    let nodal = spec.grid(c(1e-4), Chart::Nodal).unwrap();
    let node = NodeModel::linear();
    assert!(matches!(preglue_u(&node, c(1.5), nodal.clone()), Err(GlueError::Domain(_))));
    assert!(matches!(preglue_w(&node, nodal), Err(GlueError::Config(_))));
}

#[test]
fn preglue_u_converges_to_nodal_map() {
    let node = NodeModel::linear();
    let grid = GridSpec::Step { h: 0.05, n_theta: 16 }.grid(c(1e-12), Chart::Nodal).unwrap();
    let f0 = nodal_map(&node, grid.clone()).unwrap();
    let u0 = preglue_u(&node, c(0.0), grid.clone()).unwrap();
    assert_eq!(sup(&u0.branches.sub(&f0.branches)), 0.0);

    let mut last = f64::INFINITY;
    for t in [1e-2, 1e-4, 1e-6, 1e-8] {
        let u = preglue_u(&node, c(t), grid.clone()).unwrap();
        let diff = u.branches.sub(&f0.branches);
        // identity outside the cutoff disks
        let tau = t.powf(0.25);
        for side in 0..2 {
            for j in 0..grid.n_r {
                if grid.r_levels[j] >= 2.0 * tau {
                    for k in 0..grid.n_theta {
                        assert_eq!(diff.at(side, j, k), vec![c(0.0); 2]);
                    }
                }
            }
        }
        let d = l1p_norm_with(&diff, 4.0, NormConvention::Flat, None);
        assert!(d < last, "{d} !< {last}");
        last = d;
    }
}

#[test]
fn pregluing_consistency() {
    let oracle = make_pushforward_oracle(3, 0.05).unwrap();
    let node = NodeModel::from_oracle(&oracle).unwrap();
    let t = C64::from_polar(1e-4, -1.1);
    let grid = Arc::new(AnnulusGrid::for_step(t, Chart::Annulus, 0.05, 16).unwrap());
    let w = preglue_w(&node, grid.clone()).unwrap();
    let u = preglue_u(&node, t, Arc::new(grid.with_chart(Chart::Nodal).unwrap())).unwrap();
    for side in 0..2 {
        for j in 0..grid.n_r {
            for k in 0..grid.n_theta {
                let a = w.at(side, j, k);
                let b = u.branches.at(side, j, k);
                for i in 0..2 {
                    assert!((a[i] - b[i]).norm() <= 1e-12);
                }
                if j == 0 {
                    // Γ_t
                    for i in 0..2 {
                        assert!((a[i] - node.node[i]).norm() <= 1e-12);
                    }
                }
            }
        }
    }
}

#[test]
fn defect_support_and_finite_differences() {
    let node = NodeModel::linear();
    for t in [1e-2, 1e-5] {
        let grid = annulus(t, 0.0125, 16);
        let d = preglue_defect(&node, grid.clone()).unwrap();
        let tau = t.powf(0.25);
        for side in 0..2 {
            for j in 0..grid.n_r {
                let r = grid.r_levels[j];
                if r < tau || r > 2.0 * tau {
                    for k in 0..grid.n_theta {
                        assert_eq!(d.at(side, j, k), vec![c(0.0); 2]);
                    }
                }
            }
        }
        let w = preglue_w(&node, grid.clone()).unwrap();
        let fd = dbar(&w);
        let rel = lp_norm_with(&fd.sub(&d), 4.0, NormConvention::Induced, None)
            / lp_norm_with(&d, 4.0, NormConvention::Induced, None);
        assert!(rel < 1e-3, "t = {t}: {rel}");
    }
}

#[test]
fn defect_scaling_linear_model() {
    let node = NodeModel::linear();
    let ts: Vec<C64> = [1e-2, 1e-4, 1e-6, 1e-8].iter().map(|&t| c(t)).collect();
    let spec = GridSpec::Step { h: 0.05, n_theta: 16 };
    let s4 = defect_scaling_sweep(&node, 4.0, &ts, spec).unwrap();
    assert!(s4.monotone);
    let slope4 = s4.slope.unwrap();
    assert!((slope4 - 0.125).abs() <= 0.1, "{slope4}");
    let s3 = defect_scaling_sweep(&node, 3.0, &ts, spec).unwrap();
    assert!(s3.slope.unwrap() > slope4);

    // brute-force polar quadrature of |ρ'(r/τ) r/(2τ)|^p over the band
    let brute = |t: f64, p: f64| -> f64 {
        let tau = t.powf(0.25);
        let n = 20000;
        let dr = tau / n as f64;
        let mut acc = 0.0;
        for i in 0..n {
            let r = tau + (i as f64 + 0.5) * dr;
            let u = r / tau - 1.0;
            let rp = 30.0 * u * u * (1.0 - u) * (1.0 - u);
            let lam = 1.0 + t * t / r.powi(4);
            acc += (rp * r / (2.0 * tau)).powf(p) * lam.powf(1.0 - p / 2.0) * r * dr;
        }
        (2.0 * 2.0 * std::f64::consts::PI * acc).powf(1.0 / p)
    };
    for row in &s4.rows {
        let b = brute(row.t_abs, 4.0);
        assert!((row.defect_norm - b).abs() / b < 1e-4, "{} vs {b}", row.defect_norm);
    }
    let xs: Vec<f64> = s4.rows.iter().map(|r| r.t_abs.ln()).collect();
    let ys: Vec<f64> = s4.rows.iter().map(|r| brute(r.t_abs, 4.0).ln()).collect();
    assert!((fit_slope(&xs, &ys) - slope4).abs() < 1e-3);
}

#[test]
fn defect_sweep_needs_three_decades() {
    let node = NodeModel::linear();
    let ts = [c(1e-2), c(1e-3)];
    let spec = GridSpec::Step { h: 0.05, n_theta: 16 };
    assert!(matches!(defect_scaling_sweep(&node, 4.0, &ts, spec), Err(GlueError::Input(_))));
}

#[test]
fn node_model_invariants() {
    let branch = |dir: [f64; 2]| -> BranchMap {
        Arc::new(move |z: C64| BranchJet {
            value: vec![z * dir[0], z * dir[1]],
            dz: vec![c(dir[0]), c(dir[1])],
            dzbar: vec![c(0.0); 2],
        })
    };
    let q = Arc::new(nodalglue::linearized::StandardStructure { n: 2 });
    let same = NodeModel::new(branch([1.0, 1.0]), branch([2.0, 2.0]), vec![c(0.0); 2], q.clone());
    assert!(matches!(same, Err(GlueError::Input(_))));
    let off = NodeModel::new(branch([1.0, 0.0]), branch([0.0, 1.0]), vec![c(1.0), c(0.0)], q.clone());
    assert!(matches!(off, Err(GlueError::Input(_))));
    assert!(NodeModel::new(branch([1.0, 0.0]), branch([1.0, 1.0]), vec![c(0.0); 2], q).is_ok());
    assert!(matches!(NodeModel::linear().with_cutoff_exponent(0.5), Err(GlueError::Domain(_))));
}

#[test]
fn oracle_identity_at_zero_amplitude() {
    let o = make_pushforward_oracle(1, 0.0).unwrap();
    let z = [C64::new(0.3, -0.2), C64::new(-0.1, 0.6)];
    assert_eq!(o.psi(&z), z);
    assert!(o.is_trivial());
    assert_eq!(o.q_matrix(&z).norm(), 0.0);
    assert_eq!(o.c1_bound(), 0.0);
}

#[test]
fn oracle_rejects_large_amplitude() {
    assert!(matches!(make_pushforward_oracle(1, 0.2), Err(GlueError::Domain(_))));
    assert!(matches!(make_pushforward_oracle(1, -0.01), Err(GlueError::Domain(_))));
}

#[test]
fn oracle_glued_curve_solves_the_equation() {
    let o = make_pushforward_oracle(11, 0.08).unwrap();
    let grid = annulus(1e-3, 0.025, 32);
    let w = o.glued_curve(grid).unwrap();
    let d = dbar_perturbed(&w, &o).unwrap();
    let rel = lp_norm_with(&d, 4.0, NormConvention::Induced, None)
        / lp_norm_with(&dbar(&w), 4.0, NormConvention::Induced, None).max(1e-300);
    let abs = lp_norm_with(&d, f64::INFINITY, NormConvention::Flat, None);
    assert!(abs < 1e-10, "{abs} (relative {rel})");
}

#[test]
fn oracle_c1_scales_linearly() {
    let a = make_pushforward_oracle(5, 0.01).unwrap().c1_bound();
    let b = make_pushforward_oracle(5, 0.02).unwrap().c1_bound();
    assert!(((b / a) / 2.0 - 1.0).abs() < 0.2, "{a} {b}");
}

#[test]
fn hausdorff_distance() {
    let grid = annulus(1e-2, 0.1, 8);
    let f = exact_linear(grid.clone());
    assert_eq!(grid_hausdorff(&f, &f).unwrap(), 0.0);
    let shift = C64::new(3e-3, 4e-3);
    let g = MapSample::from_fn(grid.clone(), 2, |side, z| {
        let t = grid.t;
        if side == 0 {
            vec![z + shift, t / z + shift]
        } else {
            vec![t / z + shift, z + shift]
        }
    });
    let d = grid_hausdorff(&f, &g).unwrap();
    assert!(d > 0.0 && d <= shift.norm() * 2f64.sqrt() + 1e-15, "{d}");
}

#[test]
fn newton_linear_model_one_step() {
    let node = NodeModel::linear();
    let grid = annulus(1e-3, 0.025, 32);
    let (w, rec) = newton_solve(&node, grid.clone(), &NewtonOptions::default()).unwrap();
    assert!(rec.converged);
    assert_eq!(rec.iterations.len(), 2);
    assert!(rec.iterations[1].defect <= 1e-8);
    assert_eq!(rec.kantorovich.c1, 0.0);
    let exact = exact_linear(grid.clone());
    assert!(sup(&w.sub(&exact)) < 1e-9);
    // ξ* = w* − w_t is the cutoff correction plus t/x, which is O(|t|^{3/4}) past the band
    let xi = w.sub(&preglue_w(&node, grid.clone()).unwrap());
    let tau = 1e-3f64.powf(0.25);
    for side in 0..2 {
        for j in 0..grid.n_r {
            if grid.r_levels[j] >= 2.0 * tau {
                for k in 0..grid.n_theta {
                    let v = xi.at(side, j, k);
                    assert!(v.iter().all(|z| z.norm() <= 1e-3f64.powf(0.75)));
                }
            }
        }
    }
    assert!(rec.xi_norm <= 2.0 * rec.kantorovich.inverse_norm * rec.kantorovich.defect);
}

#[test]
fn newton_matches_pushforward_oracle() {
    let o = make_pushforward_oracle(7, 0.05).unwrap();
    let node = NodeModel::from_oracle(&o).unwrap();
    let grid = annulus(1e-3, 0.025, 32);
    let exact = o.glued_curve(grid.clone()).unwrap();
    let opts = NewtonOptions { boundary: Some(boundary_modes(&exact).unwrap()), ..Default::default() };
    let (w, rec) = newton_solve(&node, grid, &opts).unwrap();
    assert!(rec.converged);
    assert!(rec.kantorovich.product <= 0.25);
    assert!(rec.iterations.last().unwrap().defect <= 1e-8);
    let ratios = rec.defect_ratios();
    assert!(ratios.iter().rev().take(2).all(|&r| r <= 1e-2), "{ratios:?}");
    assert!(grid_hausdorff(&w, &exact).unwrap() <= 1e-6);
}

#[test]
fn newton_reports_kantorovich_violation() {
    let o = make_pushforward_oracle(7, 0.05).unwrap();
    let node = NodeModel::from_oracle(&o).unwrap();
    let opts = NewtonOptions { kantorovich_limit: 1e-6, ..coarse() };
    let err = newton_solve(&node, annulus(1e-2, 0.05, 16), &opts).unwrap_err();
    assert!(matches!(err, GlueError::TooLarge { .. }));
}

#[test]
fn correction_norm_trend() {
    let node = NodeModel::linear();
    let ts: Vec<C64> = [1e-2, 1e-4, 1e-6].iter().map(|&t| c(t)).collect();
    let rows = gluing_sweep(&node, &ts, GridSpec::Step { h: 0.05, n_theta: 16 }, &coarse()).unwrap();
    assert!(rows.iter().all(|r| r.converged && r.iterations == 1));
    let xs: Vec<f64> = rows.iter().map(|r| r.t_abs.ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.xi_norm.ln()).collect();
    let slope = fit_slope(&xs, &ys);
    assert!((slope - 0.125).abs() <= 0.15, "{slope}");
}

#[test]
fn annulus_stability_ratio() {
    let o = make_pushforward_oracle(2, 0.02).unwrap();
    let node = NodeModel::from_oracle(&o).unwrap();
    let opts = coarse();
    let zero = verify_annulus_stability(&node, annulus(1e-2, 0.05, 16), 0.0, &opts).unwrap();
    assert_eq!(zero.sup_difference, 0.0);
    assert_eq!(zero.ratio, 0.0);
    let ratios: Vec<f64> = [1e-2, 1e-3, 1e-4]
        .iter()
        .map(|&t| verify_annulus_stability(&node, annulus(t, 0.05, 16), 1e-4, &opts).unwrap().ratio)
        .collect();
    let hi = ratios.iter().cloned().fold(0.0, f64::max);
    let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(lo > 0.0 && hi / lo <= 3.0, "{ratios:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn preglue_plateau_is_the_branch(log_t in -8.0f64..-1.0, arg in 0.0f64..std::f64::consts::TAU, seed in 0u64..50) {
        let o = make_pushforward_oracle(seed, 0.05).unwrap();
        let node = NodeModel::from_oracle(&o).unwrap();
        let t = C64::from_polar(10f64.powf(log_t), arg);
        let grid = Arc::new(AnnulusGrid::new(t, Chart::Annulus, 24, 8, 1e-6).unwrap());
        let w = preglue_w(&node, grid.clone()).unwrap();
        let tau = t.norm().powf(0.25);
        for j in 0..grid.n_r {
            let r = grid.r_levels[j];
            for k in 0..grid.n_theta {
                let z = grid.point(j, k);
                if r >= 2.0 * tau {
                    prop_assert_eq!(w.at(0, j, k), o.psi(&[z, c(0.0)]).to_vec());
                    prop_assert_eq!(w.at(1, j, k), o.psi(&[c(0.0), z]).to_vec());
                } else if r <= tau {
                    prop_assert_eq!(w.at(0, j, k), node.node.clone());
                }
            }
        }
    }
}
