use log::warn;
use rayon::prelude::*;

use super::{SmoothingPlan, TechnologyForm, TechnologySpec};
use crate::error::{Error, Result};
use crate::panel::{LaggedRow, PanelDataset};
use crate::solver::{fit_gauss_newton, weighted_mean, GaussNewtonOptions, ResidualModel};

#[derive(Debug, Clone, PartialEq)]
pub struct FirstStepResult {
    pub h: Option<usize>,
    /// Per target: ln of the θ-scaled material elasticity at zero log inputs
    /// (for Cobb-Douglas, the smoothed log share).
    pub b_m: Vec<f64>,
    /// Per target: material coefficients after removing θ.
    pub material: Vec<Vec<f64>>,
    /// Per target: false when the local share fit failed.
    pub valid: Vec<bool>,
    pub theta: f64,
    /// Per observation: ln(θ · material elasticity) at the site's coefficients.
    pub log_scaled_elasticity: Vec<f64>,
    pub eta_hat: Vec<f64>,
    pub material_part: Vec<f64>,
    /// y minus the material terms of the production function.
    pub y_star: Vec<f64>,
    /// Per lagged row: lagged productivity proxy before subtracting the
    /// lagged non-material technology terms.
    pub nu_star: Vec<f64>,
}

/// Kernel-smoothed share equation at every panel site.
pub fn step1(panel: &PanelDataset, h1: usize, tech: &TechnologySpec) -> Result<FirstStepResult> {
    tech.check(panel)?;
    let plan = SmoothingPlan::kernel(panel.sites(), &panel.site_counts(), h1, &[])?;
    let lagged = panel.build_lagged_rows();
    let mut r = step1_with_plan(panel, &panel.shares(), tech, &plan, &lagged)?;
    r.h = Some(h1);
    Ok(r)
}

/// Scaled share coefficients at every target of `plan`.
pub(crate) fn local_share_fits(
    panel: &PanelDataset,
    shares: &[f64],
    tech: &TechnologySpec,
    plan: &SmoothingPlan,
) -> Result<Vec<Option<Vec<f64>>>> {
    match tech.form {
        TechnologyForm::CobbDouglas => {
            let mut sums = vec![0.0; panel.sites().len()];
            let counts = panel.site_counts();
            for (o, v) in panel.observations().iter().zip(shares) {
                sums[o.site] += v;
            }
            let site_means: Vec<f64> = sums.iter().zip(&counts).map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect();
            plan.site_weights
                .iter()
                .map(|w| {
                    let obs_w: Vec<f64> = w.iter().zip(&counts).map(|(w, &c)| w * c as f64).collect();
                    weighted_mean(&site_means, &obs_w).map(|b| Some(vec![b]))
                })
                .collect()
        }
        TechnologyForm::Translog => {
            let model = ShareModel::new(panel, shares, tech);
            Ok(plan
                .site_weights
                .par_iter()
                .enumerate()
                .map(|(t, w)| {
                    let obs_w: Vec<f64> = panel.observations().iter().map(|o| w[o.site]).collect();
                    match model.fit(&obs_w) {
                        Ok(c) => Some(c),
                        Err(e) => {
                            warn!("share equation failed at target {t}: {e}");
                            None
                        }
                    }
                })
                .collect())
        }
    }
}

/// Step one on the supplied shares with precomputed weights.
pub fn step1_with_plan(
    panel: &PanelDataset,
    shares: &[f64],
    tech: &TechnologySpec,
    plan: &SmoothingPlan,
    lagged: &[LaggedRow],
) -> Result<FirstStepResult> {
    if shares.len() != panel.len() {
        return Err(Error::DimensionMismatch {
            expected: panel.len(),
            found: shares.len(),
        });
    }
    let fits = local_share_fits(panel, shares, tech, plan)?;
    finish_first_step(panel, shares, tech, plan, lagged, fits)
}

/// Everything downstream of the per-target share coefficients.
pub(crate) fn finish_first_step(
    panel: &PanelDataset,
    shares: &[f64],
    tech: &TechnologySpec,
    plan: &SmoothingPlan,
    lagged: &[LaggedRow],
    fits: Vec<Option<Vec<f64>>>,
) -> Result<FirstStepResult> {
    let obs = panel.observations();
    // Per observation ln(scaled elasticity).
    let log_scaled_elasticity: Vec<f64> = obs
        .iter()
        .map(|o| match &fits[plan.site_target[o.site]] {
            None => f64::NAN,
            Some(c) => match tech.form {
                TechnologyForm::CobbDouglas => c[0],
                TechnologyForm::Translog => {
                    let e: f64 = tech.share_terms(o).iter().zip(c).map(|(x, b)| x * b).sum();
                    if e > 0.0 {
                        e.ln()
                    } else {
                        f64::NAN
                    }
                }
            },
        })
        .collect();
    let eta_hat: Vec<f64> = log_scaled_elasticity.iter().zip(shares).map(|(ls, v)| ls - v).collect();
    let finite: Vec<f64> = eta_hat.iter().copied().filter(|e| e.is_finite()).collect();
    if finite.is_empty() {
        return Err(Error::Estimation("no observation has a valid share fit".into()));
    }
    let theta = finite.iter().map(|e| e.exp()).sum::<f64>() / finite.len() as f64;
    if !(theta.is_finite() && theta > 0.0) {
        return Err(Error::NonFinite("theta".into()));
    }

    let valid: Vec<bool> = fits.iter().map(Option::is_some).collect();
    let b_m: Vec<f64> = fits
        .iter()
        .map(|c| match (c, tech.form) {
            (None, _) => f64::NAN,
            (Some(c), TechnologyForm::CobbDouglas) => c[0],
            (Some(c), TechnologyForm::Translog) => c[0].ln(),
        })
        .collect();
    let material: Vec<Vec<f64>> = fits
        .iter()
        .map(|c| match (c, tech.form) {
            (None, _) => vec![f64::NAN; tech.material_names().len()],
            (Some(c), TechnologyForm::CobbDouglas) => vec![c[0].exp() / theta],
            (Some(c), TechnologyForm::Translog) => c.iter().map(|x| x / theta).collect(),
        })
        .collect();

    let material_part: Vec<f64> = obs
        .iter()
        .map(|o| tech.material_part(&material[plan.site_target[o.site]], o))
        .collect();
    let y_star = obs.iter().zip(&material_part).map(|(o, mp)| o.y - mp).collect();
    let nu_star = lagged
        .iter()
        .map(|r| {
            let p = &obs[r.lagged];
            p.price_ratio - log_scaled_elasticity[r.lagged] + p.m - material_part[r.lagged]
        })
        .collect();
    Ok(FirstStepResult {
        h: None,
        b_m,
        material,
        valid,
        theta,
        log_scaled_elasticity,
        eta_hat,
        material_part,
        y_star,
        nu_star,
    })
}

/// Local share equation v ≈ ln(c · x) with x = (1, m, k[, l]).
pub(crate) struct ShareModel {
    terms: Vec<Vec<f64>>,
    shares: Vec<f64>,
}

impl ShareModel {
    pub(crate) fn new(panel: &PanelDataset, shares: &[f64], tech: &TechnologySpec) -> Self {
        ShareModel {
            terms: panel.observations().iter().map(|o| tech.share_terms(o)).collect(),
            shares: shares.to_vec(),
        }
    }

    pub(crate) fn predict(&self, c: &[f64], row: usize) -> f64 {
        let e: f64 = self.terms[row].iter().zip(c).map(|(x, b)| x * b).sum();
        if e > 0.0 {
            e.ln()
        } else {
            f64::NAN
        }
    }

    pub(crate) fn fit(&self, weights: &[f64]) -> Result<Vec<f64>> {
        let p = self.terms.first().map_or(0, Vec::len);
        let mut init = vec![0.0; p];
        init[0] = weighted_mean(&self.shares, weights)?.exp();
        let rep = fit_gauss_newton(self, &init, weights, GaussNewtonOptions::default())?;
        if !rep.converged {
            warn!("share equation stopped early: {}", rep.message.unwrap_or_default());
        }
        if rep.estimate.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("share coefficients".into()));
        }
        Ok(rep.estimate)
    }
}

impl ResidualModel for ShareModel {
    fn n_params(&self) -> usize {
        self.terms.first().map_or(0, Vec::len)
    }

    fn n_rows(&self) -> usize {
        self.terms.len()
    }

    fn residual(&self, theta: &[f64], row: usize) -> f64 {
        self.shares[row] - self.predict(theta, row)
    }

    fn jacobian(&self, theta: &[f64], row: usize, out: &mut [f64]) {
        let x = &self.terms[row];
        let e: f64 = x.iter().zip(theta).map(|(x, b)| x * b).sum();
        for (o, xj) in out.iter_mut().zip(x) {
            *o = -xj / e;
        }
    }
}
