//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`). The process exits nonzero on a
//! FAIL only when `LOCPROD_ACCEPTANCE_STRICT=1`, so the workspace test run
//! stays green while the report records every outcome.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use locprod::decomposition::BenchmarkRule;
use locprod::estimator::{estimate_invariant, full_fit, full_fit_at, Bandwidths};
use locprod::inference::{invariance_test, mammen_weight};
use locprod::rng::{derive_seed, stream};
use locprod::simulator::{
    coverage_study, generate_panel, grid_targets, run_monte_carlo, unoccupied_grid, CoverageConfig, EstimatorKind,
    MonteCarloReport, SimConfig, TruthSurface,
};
use locprod::solver::{
    finite_difference_jacobian, fit_gauss_newton, fit_profiled_rows, solve_weighted_linear, BilinearRows,
    GaussNewtonOptions, ProfileOptions, ResidualModel,
};
use locprod::decomposition_table;
use nalgebra::DMatrix;
use rand::Rng;

const ROOT_SEED: u64 = 2024;
const INVARIANT: TruthSurface = TruthSurface::Invariant { at: 0.75 };

struct Report {
    failed: Vec<String>,
}

impl Report {
    fn record(&mut self, id: &str, pass: bool, detail: String, started: Instant) {
        let tag = if pass { "PASS" } else { "FAIL" };
        println!("criterion {id}: {tag} {detail} [{:.1}s]", started.elapsed().as_secs_f64());
        if !pass {
            self.failed.push(id.to_string());
        }
    }
}

fn within(x: f64, target: f64, rel: f64) -> bool {
    (x - target).abs() <= rel * target
}

fn rmse(r: &MonteCarloReport, p: &str) -> f64 {
    r.metric(p).unwrap().rmse
}

fn sim(n: usize, truth: TruthSurface) -> SimConfig {
    SimConfig {
        n_firms: n,
        seed: ROOT_SEED,
        truth,
        ..Default::default()
    }
}

fn monte_carlo(report: &mut Report) {
    let t = Instant::now();
    let kernel: Vec<MonteCarloReport> = [100, 200, 400]
        .iter()
        .map(|&n| run_monte_carlo(&sim(n, TruthSurface::Varying), 200, EstimatorKind::Kernel, None).unwrap())
        .collect();

    let targets = [(1, [0.0388, 0.0508, 0.0238]), (2, [0.0278, 0.0356, 0.0178])];
    let mut ok = true;
    let mut detail = Vec::new();
    for (k, want) in targets {
        for (p, w) in ["beta_k", "rho0", "rho1"].iter().zip(want) {
            let got = rmse(&kernel[k], p);
            let hit = within(got, w, 0.25);
            ok &= hit;
            detail.push(format!(
                "n={} {p} {got:.4} vs {w}{}",
                kernel[k].config.n_firms,
                if hit { "" } else { " (out of band)" }
            ));
        }
    }
    report.record("1", ok, detail.join("; "), t);

    let t = Instant::now();
    let mut ok = true;
    let mut detail = Vec::new();
    for p in ["beta_k", "rho0", "rho1", "beta_m"] {
        let r: Vec<f64> = kernel.iter().map(|k| rmse(k, p)).collect();
        ok &= r[0] > r[1] && r[1] > r[2];
        detail.push(format!("{p} {:.4} > {:.4} > {:.4}", r[0], r[1], r[2]));
    }
    let failures: usize = kernel.iter().map(|k| k.failures).sum();
    detail.push(format!("failed simulations {failures}"));
    report.record("2", ok, detail.join("; "), t);

    let t = Instant::now();
    let split = run_monte_carlo(&sim(200, TruthSurface::Varying), 200, EstimatorKind::SampleSplitting, None).unwrap();
    let (s, k) = (rmse(&split, "beta_k"), rmse(&kernel[1], "beta_k"));
    report.record("3", s >= 2.0 * k, format!("n=200 beta_k split {s:.4} vs kernel {k:.4} (ratio {:.2})", s / k), t);
}

fn coverage(report: &mut Report) {
    let t = Instant::now();
    let mut ok = true;
    let mut detail = Vec::new();
    for (truth, lo, hi) in [(TruthSurface::Varying, 0.80, 0.98), (INVARIANT, 0.88, 0.99)] {
        let cfg = CoverageConfig {
            sim: sim(200, truth),
            ..Default::default()
        };
        let rep = coverage_study(&cfg).unwrap();
        let label = if truth == TruthSurface::Varying { "varying" } else { "invariant" };
        for row in &rep.rows {
            ok &= row.coverage >= lo && row.coverage <= hi;
            detail.push(format!("{label} {} {:.3}", row.functional, row.coverage));
        }
        ok &= rep.failures == 0;
        detail.push(format!("{label} completed {}/{}", rep.completed, cfg.q));
    }
    report.record("4", ok, detail.join("; "), t);
}

/// Rejection frequency at 0.05 over `reps` panels, plus the mean bootstrap
/// exclusion rate.
fn rejection_rate(cfg: &SimConfig, reps: u64) -> (f64, f64) {
    use rayon::prelude::*;
    let out: Vec<(bool, f64)> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let c = cfg.with_seed(derive_seed(cfg.seed, r));
            let (panel, _) = generate_panel(&c).unwrap();
            let res = invariance_test(&panel, c.shortcut_bandwidths(), &c.technology(), 199, derive_seed(c.seed, 1)).unwrap();
            (res.p_value <= 0.05, res.failed as f64 / res.requested as f64)
        })
        .collect();
    let n = out.len() as f64;
    (
        out.iter().filter(|o| o.0).count() as f64 / n,
        out.iter().map(|o| o.1).sum::<f64>() / n,
    )
}

fn specification_test(report: &mut Report) {
    let t = Instant::now();
    let (size, ex0) = rejection_rate(&sim(200, INVARIANT), 200);
    let (power, ex1) = rejection_rate(&sim(400, TruthSurface::Varying), 200);
    let ok = (0.02..=0.10).contains(&size) && power >= 0.8;
    report.record(
        "5",
        ok,
        format!("size n=200 {size:.3}; power n=400 {power:.3}; bootstrap exclusions {ex0:.4}/{ex1:.4}"),
        t,
    );
}

fn identities(report: &mut Report) {
    let t = Instant::now();
    let cfg = sim(200, TruthSurface::Varying);
    let (panel, _) = generate_panel(&cfg).unwrap();
    let fit = full_fit(&panel, cfg.shortcut_bandwidths(), &cfg.technology()).unwrap();

    let mut additivity = 0.0f64;
    for pooled in [true, false] {
        let table = decomposition_table(&panel, &fit, BenchmarkRule::MinMeanOutput, pooled).unwrap();
        for r in &table.records {
            additivity = additivity.max((r.delta_prod - r.delta_tech - r.delta_tfp).abs());
        }
    }

    let mut reconstruction = 0.0f64;
    for (i, o) in panel.observations().iter().enumerate() {
        let w = fit.productivity.omega[i];
        let e = w + fit.productivity.log_technology[i] + fit.first.eta_hat[i] - o.y;
        reconstruction = reconstruction.max(e.abs());
    }

    let mean_exp = fit.first.eta_hat.iter().map(|e| e.exp()).sum::<f64>() / fit.first.eta_hat.len() as f64;
    let theta_gap = (fit.first.theta - mean_exp).abs();

    let invariant_recovery = zero_noise_error(INVARIANT);
    let varying_recovery = zero_noise_error(TruthSurface::Varying);

    let single = SimConfig {
        grid: vec![0.75],
        ..sim(60, TruthSurface::Varying)
    };
    let (colocated, _) = generate_panel(&single).unwrap();
    let local = full_fit(&colocated, Bandwidths { h1: 50, h2: 50 }, &single.technology()).unwrap();
    let global = estimate_invariant(&colocated, &single.technology()).unwrap();
    let (a, b) = (
        local.second.coefficients[0].as_ref().unwrap(),
        global.second.coefficients[0].as_ref().unwrap(),
    );
    let mut degeneracy = (local.first.material[0][0] - global.first.material[0][0]).abs();
    for (x, y) in a.to_solver().iter().zip(b.to_solver()) {
        degeneracy = degeneracy.max((x - y).abs());
    }
    for (x, y) in local.productivity.omega.iter().zip(&global.productivity.omega) {
        degeneracy = degeneracy.max((x - y).abs());
    }

    let ok = additivity <= 1e-12
        && reconstruction <= 1e-12
        && theta_gap <= 1e-12
        && invariant_recovery <= 1e-4
        && degeneracy <= 1e-10;
    report.record(
        "6",
        ok,
        format!(
            "additivity {additivity:.1e}; omega reconstruction {reconstruction:.1e}; theta {theta_gap:.1e}; \
             zero-noise recovery {invariant_recovery:.1e} (location-invariant truth; varying truth at shortcut h \
             {varying_recovery:.1e} is smoothing bias); co-located local vs invariant {degeneracy:.1e}"
        ),
        t,
    );
}

/// Largest error over grid locations and all coefficient surfaces with both
/// noise scales at zero.
fn zero_noise_error(truth: TruthSurface) -> f64 {
    let cfg = SimConfig {
        sigma_eta: 0.0,
        sigma_zeta: 0.0,
        ..sim(200, truth)
    };
    let (panel, _) = generate_panel(&cfg).unwrap();
    let extra = unoccupied_grid(&panel, &cfg.grid);
    let fit = full_fit_at(&panel, cfg.shortcut_bandwidths(), &cfg.technology(), &extra).unwrap();
    let mut worst = (fit.first.theta - 1.0).abs();
    for (&g, t) in cfg.grid.iter().zip(grid_targets(&fit, &cfg.grid).unwrap()) {
        let c = fit.second.coefficients[t].as_ref().unwrap();
        for (est, tr) in [
            (c.tech[0], truth.beta_k(g)),
            (c.rho0, truth.rho0(g)),
            (c.rho1, truth.rho1(g)),
            (fit.first.material[t][0], truth.beta_m(g)),
        ] {
            worst = worst.max((est - tr).abs());
        }
    }
    worst
}

/// Small bilinear instance: one technology term, intercept, one control.
fn random_instance(seed: u64) -> (BilinearRows, Vec<f64>) {
    let mut rng = stream(seed, 0);
    let n = 40;
    let rho = rng.random_range(0.1..0.9);
    let (bk, r0, r2) = (rng.random_range(0.1..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.3..0.3));
    let mut current = DMatrix::zeros(n, 1);
    let mut lagged = DMatrix::zeros(n, 1);
    let mut exog = DMatrix::zeros(n, 2);
    let (mut response, mut proxy, mut weights) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for i in 0..n {
        let k0: f64 = rng.random_range(1.0..4.0);
        let k1 = k0 + rng.random_range(-0.3..0.5);
        let w0: f64 = rng.random_range(0.0..2.0);
        let g: f64 = rng.random_range(-1.0..1.0);
        current[(i, 0)] = k1;
        lagged[(i, 0)] = k0;
        exog[(i, 0)] = 1.0;
        exog[(i, 1)] = g;
        proxy[i] = w0 + bk * k0;
        response[i] = bk * k1 + r0 + rho * w0 + r2 * g + 0.05 * rng.random_range(-1.0..1.0);
        weights[i] = rng.random_range(0.2..1.0);
    }
    (BilinearRows::new(current, lagged, exog, response, proxy).unwrap(), weights)
}

/// Inner weighted least squares at fixed `rho`, returning `[β, γ, rho]` and RSS.
fn at_rho(rows: &BilinearRows, w: &[f64], rho: f64) -> (Vec<f64>, f64) {
    let n = rows.n_rows();
    let mut x = DMatrix::zeros(n, 3);
    let mut y = vec![0.0; n];
    for i in 0..n {
        x[(i, 0)] = rows.current[(i, 0)] - rho * rows.lagged[(i, 0)];
        x[(i, 1)] = rows.exog[(i, 0)];
        x[(i, 2)] = rows.exog[(i, 1)];
        y[i] = rows.response[i] - rho * rows.proxy[i];
    }
    let fit = solve_weighted_linear(&x, &y, w).unwrap();
    let mut theta = fit.coefficients;
    theta.push(rho);
    (theta, fit.weighted_rss)
}

fn grid_oracle(rows: &BilinearRows, w: &[f64]) -> Vec<f64> {
    let scan = |lo: f64, step: f64, count: usize| {
        (0..=count)
            .map(|j| lo + step * j as f64)
            .map(|r| at_rho(rows, w, r))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
    };
    let coarse = scan(-0.2, 1e-4, 14_000);
    let fine = scan(coarse.0[3] - 2e-4, 1e-7, 4_000);
    fine.0
}

fn solver(report: &mut Report) {
    let t = Instant::now();
    let (mut param_gap, mut jac_gap, mut rss_gap) = (0.0f64, 0.0f64, 0.0f64);
    for inst in 0..20 {
        let (rows, w) = random_instance(derive_seed(ROOT_SEED, 7_000 + inst));
        let profiled = fit_profiled_rows(&rows, &w, ProfileOptions::default()).unwrap();
        let oracle = grid_oracle(&rows, &w);
        for (a, b) in profiled.estimate.iter().zip(&oracle) {
            param_gap = param_gap.max((a - b).abs());
        }

        let mut rng = stream(ROOT_SEED, 8_000 + inst);
        let probe: Vec<f64> = (0..rows.n_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut analytic = vec![0.0; rows.n_params()];
        for i in 0..rows.n_rows() {
            rows.jacobian(&probe, i, &mut analytic);
            let fd = finite_difference_jacobian(&rows, &probe, i, 1e-6);
            for (a, f) in analytic.iter().zip(&fd) {
                jac_gap = jac_gap.max((a - f).abs() / a.abs().max(1.0));
            }
        }

        let start = vec![0.0, 0.0, 0.0, 0.5];
        let gn = fit_gauss_newton(&rows, &start, &w, GaussNewtonOptions::default()).unwrap();
        rss_gap = rss_gap.max((gn.weighted_rss - profiled.weighted_rss).abs());
    }
    let ok = param_gap <= 1e-4 && jac_gap <= 1e-5 && rss_gap <= 1e-6;
    report.record(
        "7",
        ok,
        format!("20 instances: profiled vs grid oracle {param_gap:.1e}; jacobian {jac_gap:.1e}; gauss-newton rss {rss_gap:.1e}"),
        t,
    );
}

fn mammen(report: &mut Report) {
    let t = Instant::now();
    let mut rng = stream(ROOT_SEED, 9_000);
    let n = 1_000_000;
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..n {
        let x = mammen_weight(&mut rng);
        s += x;
        s2 += x * x;
    }
    let mean = s / n as f64;
    let var = s2 / n as f64 - mean * mean;
    report.record(
        "8",
        mean.abs() < 0.005 && (var - 1.0).abs() < 0.01,
        format!("mean {mean:.5}; variance {var:.5}"),
        t,
    );
}

fn cli_fixture(report: &mut Report) {
    let t = Instant::now();
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let dir = tempfile::tempdir().unwrap();
    let mut detail = Vec::new();
    let mut ok = true;
    for cmd in ["estimate", "cv", "infer", "test-invariance", "decompose", "simulate", "coverage"] {
        let out = dir.path().join(cmd);
        let o = Command::new(env!("CARGO_BIN_EXE_locprod"))
            .arg(cmd)
            .arg("--config")
            .arg(fixtures.join("config.toml"))
            .arg("--out")
            .arg(&out)
            .env_remove("LOCPROD_SEED")
            .env_remove("LOCPROD_WORKERS")
            .output()
            .unwrap();
        let pass = o.status.success() && out.join("manifest.json").exists();
        ok &= pass;
        detail.push(format!("{cmd} {}", if pass { "ok" } else { "failed" }));
    }
    report.record("9", ok, detail.join("; "), t);
}

fn main() {
    let mut report = Report { failed: Vec::new() };
    identities(&mut report);
    solver(&mut report);
    mammen(&mut report);
    cli_fixture(&mut report);
    monte_carlo(&mut report);
    coverage(&mut report);
    specification_test(&mut report);

    if report.failed.is_empty() {
        println!("acceptance: all criteria pass");
    } else {
        println!("acceptance: failing criteria {}", report.failed.join(", "));
        if std::env::var("LOCPROD_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
            std::process::exit(1);
        }
    }
}
