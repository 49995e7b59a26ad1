//! Acceptance suite: one PASS/FAIL line per criterion. Run with
//! `cargo test -p nodalglue --test acceptance -- --nocapture` to see the lines.

use std::sync::Arc;
use std::time::{Duration, Instant};

use nodalglue::cauchy_ops::{boundary_modes, cauchy_transform, trial_seed};
use nodalglue::experiments::{discrepancy_sweep, max_principle_sweep, right_inverse_norm_sweep};
use nodalglue::geometry::Chart;
use nodalglue::geometry::{beta_gradient_integral, build_annulus_grid, ZeroOneForm};
use nodalglue::gluing::{
    defect_scaling_sweep, grid_hausdorff, make_pushforward_oracle, newton_solve, GridSpec, NewtonOptions, NodeModel,
};
use nodalglue::index::{cp2_stratum_report, d_of_A, moduli_formal_dim, normal_index, Component, NodalConfiguration};
use nodalglue::linearized::{line_bundle_dbar_dims, LineBundlePerturbation, MAX_PRINCIPLE_CONSTANT};
use nodalglue::C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<(bool, String), nodalglue::GlueError>;

fn c(t: f64) -> C64 {
    C64::new(t, 0.0)
}

fn sci(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn within(start: Instant, limit: u64) -> (bool, Duration) {
    let e = start.elapsed();
    (e < Duration::from_secs(limit), e)
}

fn defect_scaling() -> Outcome {
    let start = Instant::now();
    let ts: Vec<C64> = [1e-2, 1e-4, 1e-6, 1e-8].iter().map(|&t| c(t)).collect();
    let sweep = defect_scaling_sweep(&NodeModel::linear(), 4.0, &ts, GridSpec::Step { h: 0.05, n_theta: 16 })?;
    let slope = sweep.slope.unwrap_or(f64::NAN);
    let (fast, e) = within(start, 30);
    Ok(((slope - 0.125).abs() <= 0.1 && fast, format!("slope {slope:.5}, {e:.2?}")))
}

fn uniform_right_inverse() -> Outcome {
    let start = Instant::now();
    let ts = [c(1e-2), c(1e-4), c(1e-6)];
    let rows = right_inverse_norm_sweep(&ts, 4.0, 20, 2024, GridSpec::Step { h: 0.05, n_theta: 16 })?;
    let est: Vec<f64> = rows.iter().map(|r| r.estimate).collect();
    let hi = est.iter().cloned().fold(f64::MIN, f64::max);
    let lo = est.iter().cloned().fold(f64::MAX, f64::min);
    let spread = hi / lo;
    let (fast, e) = within(start, 60);
    Ok((spread <= 3.0 && lo > 0.0 && fast, format!("norms {est:.4?}, spread {spread:.3}, {e:.2?}")))
}

fn disk_indicator_error(n_r: usize, n_theta: usize) -> Result<f64, nodalglue::GlueError> {
    let grid = Arc::new(build_annulus_grid(c(0.0), n_r, n_theta)?);
    let one = ZeroOneForm::from_fn(grid.clone(), 1, |_, _| vec![c(1.0)]);
    let p = cauchy_transform(&one)?;
    let mut err: f64 = 0.0;
    for j in 0..grid.n_r {
        for k in 0..grid.n_theta {
            err = err.max((p.sides[0].get(0, j, k) - grid.point(j, k).conj()).norm());
        }
    }
    Ok(err)
}

fn cauchy_oracle() -> Outcome {
    let coarse = disk_indicator_error(64, 128)?;
    let fine = disk_indicator_error(128, 256)?;
    let improves = fine * 4.0 <= coarse || fine <= 1e-12;
    Ok((coarse <= 1e-4 && improves, format!("error {coarse:.2e} at 64x128, {fine:.2e} at 128x256")))
}

fn quasi_inverse_discrepancy() -> Outcome {
    let ts = [c(1e-2), c(1e-4), c(1e-6)];
    let rows = discrepancy_sweep(&NodeModel::linear(), &ts, 4.0, 20, 99, GridSpec::Step { h: 0.05, n_theta: 16 })?;
    let med: Vec<f64> = rows.iter().map(|r| r.median_discrepancy).collect();
    Ok((med.windows(2).all(|w| w[1] < w[0]), format!("medians {}", sci(&med))))
}

fn max_principle() -> Outcome {
    let ts = [c(1e-2), c(1e-4), c(1e-6)];
    let trials = max_principle_sweep(&NodeModel::linear(), &ts, 50, 1e-2, 5, GridSpec::Step { h: 0.1, n_theta: 16 })?;
    let worst = trials.iter().map(|t| t.ratio).fold(0.0, f64::max);
    let ok = trials.len() == 50 && trials.iter().all(|t| t.ratio <= MAX_PRINCIPLE_CONSTANT);
    Ok((ok, format!("{} trials, worst ratio {worst:.4}", trials.len())))
}

fn resolvent_bounds() -> Outcome {
    let ts = [c(1e-2), c(1e-4), c(1e-6)];
    let mut ok = true;
    let (mut phi, mut inv, mut res): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for a_sup in [1e-3, 1e-2] {
        let trials =
            max_principle_sweep(&NodeModel::linear(), &ts, 9, a_sup, 17, GridSpec::Step { h: 0.1, n_theta: 16 })?;
        for t in &trials {
            ok &= t.phi_sup <= 2.0 && t.phi_inv_sup <= 2.0 && t.resolvent_residual <= 1e-8;
            phi = phi.max(t.phi_sup);
            inv = inv.max(t.phi_inv_sup);
            res = res.max(t.resolvent_residual);
        }
    }
    Ok((ok, format!("sup Φ {phi:.6}, sup Φ⁻¹ {inv:.6}, residual {res:.2e}")))
}

fn newton_oracle() -> Outcome {
    let start = Instant::now();
    let oracle = make_pushforward_oracle(7, 0.05)?;
    let node = NodeModel::from_oracle(&oracle)?;
    let grid = GridSpec::Step { h: 0.025, n_theta: 32 }.grid(c(1e-3), Chart::Annulus)?;
    let exact = oracle.glued_curve(grid.clone())?;
    let opts = NewtonOptions { boundary: Some(boundary_modes(&exact)?), ..Default::default() };
    let (w, rec) = newton_solve(&node, grid, &opts)?;
    let d = grid_hausdorff(&w, &exact)?;
    let ratios = rec.defect_ratios();
    let tail_ok = ratios.len() >= 2 && ratios.iter().rev().take(2).all(|&r| r <= 1e-2);
    let (fast, e) = within(start, 120);
    Ok((rec.converged && d <= 1e-6 && tail_ok && fast, format!("Hausdorff {d:.2e}, ratios {}, {e:.2?}", sci(&ratios))))
}

fn random_configuration(rng: &mut ChaCha8Rng) -> NodalConfiguration {
    let r = rng.gen_range(1..=4usize);
    let components = (0..r)
        .map(|_| Component {
            genus: rng.gen_range(0..4),
            c1_pairing: rng.gen_range(-5..30),
            df_zero_count: rng.gen_range(0..4),
            marked_count: 0,
        })
        .collect();
    let mut intersection = vec![vec![0i64; r]; r];
    for i in 0..r {
        for j in i..r {
            let v = rng.gen_range(-3..6);
            intersection[i][j] = v;
            intersection[j][i] = v;
        }
    }
    let m = r as i64 - 1 + rng.gen_range(0..5);
    NodalConfiguration { components, m, intersection, n: 2, c1_total: None, genus: None }
}

fn index_suite() -> Outcome {
    let start = Instant::now();
    let node = NodalConfiguration::irreducible(0, 9, 9, 1, 0);
    let mut ok = normal_index(&node)? == 8;
    for (d, dim, g, fix) in [(1, 2, 0, 2), (2, 5, 0, 5), (3, 9, 1, 8)] {
        let r = cp2_stratum_report(d)?;
        ok &= r.dim_c == dim && d_of_A(d * d, 3 * d)? == dim && r.genus == g && r.max_fixed_points == fix;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(8, 0));
    for _ in 0..100 {
        let cfg = random_configuration(&mut rng);
        let i = moduli_formal_dim(cfg.c1(), cfg.arithmetic_genus(), 2)?;
        ok &= normal_index(&cfg)? == i - cfg.m - cfg.df_zeros();
    }
    let (fast, e) = within(start, 1);
    Ok((ok && fast, format!("node stratum 8, 100 random identities, {e:.2?}")))
}

fn automatic_regularity() -> Outcome {
    let mut ok = true;
    let mut worst = String::new();
    for trial in 0..10 {
        let a = LineBundlePerturbation::random(trial_seed(31, trial), 0.05);
        for k in -2..=3 {
            let dims = line_bundle_dbar_dims(k, &a, 6)?;
            let good = dims.index == k + 1 && (k < -1 || dims.coker_dim == 0);
            if !good && worst.is_empty() {
                worst = format!("; k = {k}: kernel {} coker {}", dims.kernel_dim, dims.coker_dim);
            }
            ok &= good;
        }
    }
    Ok((ok, format!("10 perturbations, k = -2..3{worst}")))
}

fn beta_integral() -> Outcome {
    let deltas = [1e-1, 1e-2, 1e-3, 1e-4, 1e-5];
    let mut ok = true;
    let mut report = vec![];
    for p in [3.0, 4.0] {
        let v = deltas.iter().map(|&d| beta_gradient_integral(d, p)).collect::<Result<Vec<_>, _>>()?;
        ok &= v.windows(2).all(|w| w[1] < w[0]);
        report.push(format!("p = {p}: {}", sci(&v)));
    }
    Ok((ok, report.join("; ")))
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("pregluing defect scaling", defect_scaling),
        ("uniform right inverse", uniform_right_inverse),
        ("Cauchy transform oracle", cauchy_oracle),
        ("quasi-inverse discrepancy", quasi_inverse_discrepancy),
        ("weak maximum principle", max_principle),
        ("resolvent bounds", resolvent_bounds),
        ("Newton/oracle equivalence", newton_oracle),
        ("index suite", index_suite),
        ("automatic regularity", automatic_regularity),
        ("cutoff gradient integral", beta_integral),
    ];
    let mut failed = vec![];
    for (i, (name, run)) in criteria.iter().enumerate() {
        let (pass, detail) = match run() {
            Ok(v) => v,
            Err(e) => (false, format!("error: {e}")),
        };
        println!("{} {:>2} {name}: {detail}", if pass { "PASS" } else { "FAIL" }, i + 1);
        if !pass {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
