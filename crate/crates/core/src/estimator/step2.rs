use log::warn;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{lagged_site_counts, FirstStepResult, SmoothingPlan, TechnologyForm, TechnologySpec};
use crate::error::{Error, Result};
use crate::panel::{LaggedRow, PanelDataset};
use crate::solver::{
    fit_gauss_newton, fit_profiled_nls, BilinearRows, BilinearSystem, GaussNewtonOptions, ProfileOptions, SolverReport,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecondStepCoefficients {
    /// Non-material technology coefficients in [`TechnologySpec::tech_names`] order.
    pub tech: Vec<f64>,
    pub rho0: f64,
    pub rho1: f64,
    /// One coefficient per control.
    pub rho2: Vec<f64>,
}

impl SecondStepCoefficients {
    /// Solver ordering: technology terms, intercept, controls, persistence.
    pub fn to_solver(&self) -> Vec<f64> {
        let mut v = self.tech.clone();
        v.push(self.rho0);
        v.extend(&self.rho2);
        v.push(self.rho1);
        v
    }

    pub fn from_solver(theta: &[f64], n_tech: usize) -> Self {
        let last = theta.len() - 1;
        SecondStepCoefficients {
            tech: theta[..n_tech].to_vec(),
            rho0: theta[n_tech],
            rho2: theta[n_tech + 1..last].to_vec(),
            rho1: theta[last],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct LocationDiagnostics {
    pub converged: bool,
    pub iterations: usize,
    pub weighted_rss: f64,
    pub gradient_norm: f64,
    pub condition: f64,
    pub message: Option<String>,
    /// Set when no coefficients could be produced at this target.
    pub failure: Option<String>,
}

impl From<&SolverReport> for LocationDiagnostics {
    fn from(r: &SolverReport) -> Self {
        LocationDiagnostics {
            converged: r.converged,
            iterations: r.iterations,
            weighted_rss: r.weighted_rss,
            gradient_norm: r.gradient_norm,
            condition: r.condition,
            message: r.message.clone(),
            failure: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SecondStepResult {
    pub h: Option<usize>,
    /// Per target; `None` marks a flagged location.
    pub coefficients: Vec<Option<SecondStepCoefficients>>,
    pub diagnostics: Vec<LocationDiagnostics>,
    /// Per lagged row: fitted right-hand side at the row's own site.
    pub fitted: Vec<f64>,
    /// Per lagged row: composite residual (ζ + η).
    pub residuals: Vec<f64>,
}

/// Second-step regression rows, one per lagged row.
pub fn second_step_rows(
    panel: &PanelDataset,
    tech: &TechnologySpec,
    first: &FirstStepResult,
    lagged: &[LaggedRow],
) -> Result<BilinearRows> {
    let obs = panel.observations();
    let n = lagged.len();
    let p = tech.n_tech();
    let q = 1 + tech.control_dimension;
    let mut current = DMatrix::zeros(n, p);
    let mut lag = DMatrix::zeros(n, p);
    let mut exog = DMatrix::zeros(n, q);
    for (i, r) in lagged.iter().enumerate() {
        let (c, l) = (&obs[r.current], &obs[r.lagged]);
        for (j, x) in tech.tech_terms(c).into_iter().enumerate() {
            current[(i, j)] = x;
        }
        for (j, x) in tech.tech_terms(l).into_iter().enumerate() {
            lag[(i, j)] = x;
        }
        exog[(i, 0)] = 1.0;
        for (j, g) in l.controls.iter().enumerate() {
            exog[(i, 1 + j)] = *g;
        }
    }
    let response = lagged.iter().map(|r| first.y_star[r.current]).collect();
    BilinearRows::new(current, lag, exog, response, first.nu_star.clone())
}

/// Kernel-weighted second step at every panel site.
pub fn step2(panel: &PanelDataset, first: &FirstStepResult, h2: usize, tech: &TechnologySpec) -> Result<SecondStepResult> {
    tech.check(panel)?;
    let lagged = panel.build_lagged_rows();
    if lagged.is_empty() {
        return Err(Error::InvalidArgument("panel has no lagged rows".into()));
    }
    let plan = SmoothingPlan::kernel(panel.sites(), &lagged_site_counts(panel, &lagged), h2, &[])?;
    let rows = second_step_rows(panel, tech, first, &lagged)?;
    let mut r = step2_with_plan(panel, tech, &rows, &lagged, &plan)?;
    r.h = Some(h2);
    Ok(r)
}

fn usable(rows: &BilinearRows, i: usize) -> bool {
    rows.response[i].is_finite()
        && rows.proxy[i].is_finite()
        && rows.current.row(i).iter().chain(rows.lagged.row(i).iter()).all(|x| x.is_finite())
}

/// Per-site compressed systems with unit weights.
pub(crate) fn site_systems(
    panel: &PanelDataset,
    rows: &BilinearRows,
    lagged: &[LaggedRow],
) -> Result<(Vec<Option<BilinearSystem>>, Vec<usize>)> {
    let obs = panel.observations();
    let row_site: Vec<usize> = lagged.iter().map(|r| obs[r.current].site).collect();
    let mut members = vec![Vec::new(); panel.sites().len()];
    for (i, &s) in row_site.iter().enumerate() {
        if usable(rows, i) {
            members[s].push(i);
        }
    }
    let systems = members
        .par_iter()
        .map(|idx| {
            if idx.is_empty() {
                Ok(None)
            } else {
                BilinearSystem::from_rows(&rows.select(idx), &vec![1.0; idx.len()]).map(Some)
            }
        })
        .collect::<Result<_>>()?;
    Ok((systems, row_site))
}

/// Fit at one target from per-site systems weighted by `weights`.
pub(crate) fn fit_target(
    systems: &[Option<BilinearSystem>],
    weights: &[f64],
    polish: Option<(&BilinearRows, &[usize])>,
) -> Result<SolverReport> {
    let stacked = BilinearSystem::stack(
        systems
            .iter()
            .zip(weights)
            .filter_map(|(s, &w)| s.as_ref().map(|s| (s, w))),
    )?;
    let report = fit_profiled_nls(&stacked, ProfileOptions::default())?;
    match polish {
        None => Ok(report),
        Some((rows, row_site)) => {
            let w: Vec<f64> = (0..rows.n_rows())
                .map(|i| if usable(rows, i) { weights[row_site[i]] } else { 0.0 })
                .collect();
            let keep: Vec<usize> = (0..rows.n_rows()).filter(|&i| w[i] > 0.0).collect();
            let sub = rows.select(&keep);
            let sub_w: Vec<f64> = keep.iter().map(|&i| w[i]).collect();
            let gn = fit_gauss_newton(&sub, &report.estimate, &sub_w, GaussNewtonOptions::default())?;
            Ok(if gn.weighted_rss <= report.weighted_rss { gn } else { report })
        }
    }
}

/// Step two on prepared rows with precomputed weights.
pub fn step2_with_plan(
    panel: &PanelDataset,
    tech: &TechnologySpec,
    rows: &BilinearRows,
    lagged: &[LaggedRow],
    plan: &SmoothingPlan,
) -> Result<SecondStepResult> {
    if rows.n_rows() != lagged.len() {
        return Err(Error::DimensionMismatch {
            expected: lagged.len(),
            found: rows.n_rows(),
        });
    }
    let (systems, row_site) = site_systems(panel, rows, lagged)?;
    let polish = match tech.form {
        TechnologyForm::CobbDouglas => None,
        TechnologyForm::Translog => Some((rows, row_site.as_slice())),
    };
    let n_tech = tech.n_tech();
    let fits: Vec<(Option<SecondStepCoefficients>, LocationDiagnostics)> = plan
        .site_weights
        .par_iter()
        .enumerate()
        .map(|(t, w)| match fit_target(&systems, w, polish) {
            Ok(rep) => (
                Some(SecondStepCoefficients::from_solver(&rep.estimate, n_tech)),
                LocationDiagnostics::from(&rep),
            ),
            Err(e) => {
                warn!("second step failed at target {t}: {e}");
                (
                    None,
                    LocationDiagnostics {
                        failure: Some(e.to_string()),
                        ..Default::default()
                    },
                )
            }
        })
        .collect();
    let (coefficients, diagnostics): (Vec<_>, Vec<_>) = fits.into_iter().unzip();

    let mut fitted = Vec::with_capacity(rows.n_rows());
    let mut residuals = Vec::with_capacity(rows.n_rows());
    for (i, &s) in row_site.iter().enumerate() {
        match &coefficients[plan.site_target[s]] {
            Some(c) => {
                let r = rows.residual(&c.to_solver(), i);
                residuals.push(r);
                fitted.push(rows.response[i] - r);
            }
            None => {
                residuals.push(f64::NAN);
                fitted.push(f64::NAN);
            }
        }
    }
    Ok(SecondStepResult {
        h: None,
        coefficients,
        diagnostics,
        fitted,
        residuals,
    })
}

#[cfg(test)]
mod tests {
    use super::super::testutil::MicroDgp;
    use super::super::{step1, Bandwidths, FitPlans};
    use super::*;
    use crate::solver::{fit_profiled_rows, solve_weighted_linear};

    #[test]
    fn residuals_reproduce_model_equation() {
        let (panel, _) = MicroDgp {
            varying: true,
            sigma_eta: 0.05,
            sigma_zeta: 0.03,
            with_control: true,
            ..Default::default()
        }
        .generate(11);
        let tech = TechnologySpec::for_panel(TechnologyForm::CobbDouglas, &panel);
        let first = step1(&panel, 40, &tech).unwrap();
        let second = step2(&panel, &first, 40, &tech).unwrap();
        let lagged = panel.build_lagged_rows();
        let obs = panel.observations();
        for (i, r) in lagged.iter().enumerate() {
            let (c, l) = (&obs[r.current], &obs[r.lagged]);
            let th = second.coefficients[c.site].as_ref().unwrap();
            let expect = first.y_star[r.current]
                - th.tech[0] * c.k
                - th.tech[1] * c.l
                - th.rho0
                - th.rho1 * (first.nu_star[i] - th.tech[0] * l.k - th.tech[1] * l.l)
                - th.rho2[0] * l.controls[0];
            assert!((second.residuals[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn single_location_matches_grid_oracle() {
        let (panel, _) = MicroDgp {
            n_sites: 1,
            firms_per_site: 6,
            periods: 6,
            sigma_eta: 0.05,
            sigma_zeta: 0.05,
            ..Default::default()
        }
        .generate(12);
        let tech = TechnologySpec::for_panel(TechnologyForm::CobbDouglas, &panel);
        let lagged = panel.build_lagged_rows();
        assert_eq!(lagged.len(), 30);
        let first = step1(&panel, 10, &tech).unwrap();
        let second = step2(&panel, &first, 10, &tech).unwrap();
        let rows = second_step_rows(&panel, &tech, &first, &lagged).unwrap();
        let n = rows.n_rows();
        let mut best = f64::INFINITY;
        for i in 0..=14_000 {
            let rho1 = -0.2 + 1e-4 * i as f64;
            let x = DMatrix::from_fn(n, 3, |r, j| match j {
                0 | 1 => rows.current[(r, j)] - rho1 * rows.lagged[(r, j)],
                _ => 1.0,
            });
            let y: Vec<f64> = (0..n).map(|r| rows.response[r] - rho1 * rows.proxy[r]).collect();
            best = best.min(solve_weighted_linear(&x, &y, &vec![1.0; n]).unwrap().weighted_rss);
        }
        // one site: kernel weights are uniform up to a constant
        let ours = second.diagnostics[0].weighted_rss / crate::kernel::KernelFamily::Gaussian.eval(0.0);
        assert!((ours - best).abs() < 1e-4, "{ours} {best}");
        let direct = fit_profiled_rows(&rows, &vec![1.0; n], ProfileOptions::default()).unwrap();
        assert!(direct.weighted_rss <= best + 1e-12);
    }

    #[test]
    fn compressed_fit_matches_raw_weighted_fit() {
        let (panel, _) = MicroDgp {
            varying: true,
            sigma_eta: 0.05,
            sigma_zeta: 0.03,
            ..Default::default()
        }
        .generate(13);
        let tech = TechnologySpec::for_panel(TechnologyForm::CobbDouglas, &panel);
        let plans = FitPlans::kernel(&panel, Bandwidths { h1: 40, h2: 40 }, &[]).unwrap();
        let fit = super::super::fit_with_plans(&panel, &tech, &plans, &panel.shares(), None).unwrap();
        let rows = second_step_rows(&panel, &tech, &fit.first, &plans.lagged).unwrap();
        let obs = panel.observations();
        for t in 0..plans.second.n_targets() {
            let w: Vec<f64> = plans.lagged.iter().map(|r| plans.second.site_weights[t][obs[r.current].site]).collect();
            let raw = fit_profiled_rows(&rows, &w, ProfileOptions::default()).unwrap();
            let ours = fit.second.coefficients[t].as_ref().unwrap().to_solver();
            for (a, b) in raw.estimate.iter().zip(&ours) {
                assert!((a - b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn translog_second_step_nests_cobb_douglas() {
        let (panel, truth) = MicroDgp::default().generate(14);
        let tech = TechnologySpec::for_panel(TechnologyForm::Translog, &panel);
        let first = step1(&panel, 30, &tech).unwrap();
        let second = step2(&panel, &first, 30, &tech).unwrap();
        for c in &second.coefficients {
            let c = c.as_ref().unwrap();
            assert!((c.tech[0] - truth.beta_k[0]).abs() < 5e-3);
            assert!((c.tech[2] - truth.beta_l[0]).abs() < 5e-3);
            for idx in [1, 3, 4] {
                assert!(c.tech[idx].abs() < 5e-3, "{:?}", c.tech);
            }
            assert!((c.rho1 - truth.rho1).abs() < 5e-3);
        }
    }
}
