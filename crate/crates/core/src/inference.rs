//! Wild residual block bootstrap, bias-corrected percentile intervals and
//! the bootstrap test of location invariance.
//!
//! One Mammen weight is drawn per firm and multiplies every residual of
//! that firm in both estimation steps.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::decomposition::returns_to_scale;
use crate::error::{Error, Result};
use crate::estimator::{
    assemble, estimate_invariant, second_step_rows, step1_with_plan, step2_with_plan, Bandwidths,
    EstimationResult, FitPlans, TechnologySpec,
};
use crate::panel::{PanelDataset, PanelObservation};
use crate::rng::stream;
use crate::stats::quantile_sorted;

const SQRT5: f64 = 2.236_067_977_499_79;

/// Draw from the two-point law with mean 0 and variance 1.
pub fn mammen_weight<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let p_high = (SQRT5 - 1.0) / (2.0 * SQRT5);
    if rng.random::<f64>() < p_high {
        (1.0 + SQRT5) / 2.0
    } else {
        (1.0 - SQRT5) / 2.0
    }
}

/// Scalar summaries tracked across replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Functional {
    /// A named coefficient (`beta_k`, `beta_m`, `rho0`, `rho2_0`, …) at a target.
    Coefficient { name: String, target: usize },
    /// Average of a named coefficient over a set of targets.
    MeanCoefficient { name: String, targets: Vec<usize> },
    /// Returns to scale at a target; translog elasticities are taken at zero log inputs.
    ReturnsToScale { target: usize },
    Theta,
}

impl Functional {
    pub fn id(&self) -> String {
        match self {
            Functional::Coefficient { name, target } => format!("{name}@{target}"),
            Functional::MeanCoefficient { name, .. } => format!("mean_{name}"),
            Functional::ReturnsToScale { target } => format!("rts@{target}"),
            Functional::Theta => "theta".into(),
        }
    }

    pub fn evaluate(&self, fit: &EstimationResult) -> f64 {
        match self {
            Functional::Coefficient { name, target } => coefficient(fit, name, *target),
            Functional::MeanCoefficient { name, targets } => {
                targets.iter().map(|&t| coefficient(fit, name, t)).sum::<f64>() / targets.len() as f64
            }
            Functional::ReturnsToScale { target } => {
                let Some(c) = fit.second.coefficients.get(*target).and_then(Option::as_ref) else {
                    return f64::NAN;
                };
                returns_to_scale(&fit.tech, &fit.first.material[*target], &c.tech, &PanelObservation::default())
            }
            Functional::Theta => fit.first.theta,
        }
    }

    /// Every coefficient at every target plus across-target means.
    pub fn all_coefficients(fit: &EstimationResult) -> Vec<Functional> {
        let mut names: Vec<String> = fit.tech.material_names().iter().map(|s| s.to_string()).collect();
        names.extend(fit.tech.tech_names().iter().map(|s| s.to_string()));
        names.extend(["rho0".to_string(), "rho1".to_string()]);
        names.extend((0..fit.tech.control_dimension).map(|j| format!("rho2_{j}")));
        let targets: Vec<usize> = (0..fit.targets.len()).collect();
        let mut out = vec![Functional::Theta];
        for n in &names {
            out.push(Functional::MeanCoefficient {
                name: n.clone(),
                targets: targets.clone(),
            });
            for &t in &targets {
                out.push(Functional::Coefficient { name: n.clone(), target: t });
            }
        }
        out
    }
}

/// Named coefficient at a target; NaN when absent.
pub fn coefficient(fit: &EstimationResult, name: &str, target: usize) -> f64 {
    if target >= fit.targets.len() {
        return f64::NAN;
    }
    if name == "b_m" {
        return fit.first.b_m[target];
    }
    if let Some(j) = fit.tech.material_names().iter().position(|n| *n == name) {
        return fit.first.material[target][j];
    }
    let Some(c) = &fit.second.coefficients[target] else {
        return f64::NAN;
    };
    if let Some(j) = fit.tech.tech_names().iter().position(|n| *n == name) {
        return c.tech[j];
    }
    match name {
        "rho0" => c.rho0,
        "rho1" => c.rho1,
        _ => name
            .strip_prefix("rho2_")
            .and_then(|j| j.parse::<usize>().ok())
            .and_then(|j| c.rho2.get(j).copied())
            .unwrap_or(f64::NAN),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapDraws {
    pub requested: usize,
    pub seed: u64,
    pub functionals: Vec<Functional>,
    pub point: Vec<f64>,
    /// Replicate indices that succeeded, aligned with `draws`.
    pub replicates: Vec<usize>,
    /// `draws[r][f]`: functional `f` in successful replicate `r`.
    pub draws: Vec<Vec<f64>>,
    pub failed: Vec<usize>,
}

impl BootstrapDraws {
    pub fn column(&self, f: usize) -> Vec<f64> {
        self.draws.iter().map(|d| d[f]).collect()
    }

    pub fn exclusion_rate(&self) -> f64 {
        self.failed.len() as f64 / self.requested.max(1) as f64
    }
}

/// One Mammen weight per firm from the replicate's stream.
pub fn firm_weights(n_firms: usize, seed: u64, replicate: usize) -> Vec<f64> {
    let mut rng = stream(seed, replicate as u64);
    (0..n_firms).map(|_| mammen_weight(&mut rng)).collect()
}

fn recentered(x: &[f64]) -> Vec<f64> {
    let finite: Vec<f64> = x.iter().copied().filter(|v| v.is_finite()).collect();
    let m = finite.iter().sum::<f64>() / finite.len().max(1) as f64;
    x.iter().map(|v| v - m).collect()
}

/// Bootstrap data for one replicate: shares and second-step responses.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateData {
    pub shares: Vec<f64>,
    pub y_star: Vec<f64>,
}

/// Regenerate shares and responses from a fit's fitted values and its
/// recentered residuals scaled by per-firm weights.
pub fn regenerate(panel: &PanelDataset, fit: &EstimationResult, xi: &[f64]) -> ReplicateData {
    let obs = panel.observations();
    let eta = recentered(&fit.first.eta_hat);
    let comp = recentered(&fit.second.residuals);
    let shares = obs
        .iter()
        .enumerate()
        .map(|(i, o)| fit.first.log_scaled_elasticity[i] - xi[o.firm] * eta[i])
        .collect();
    let y_star = fit
        .lagged
        .iter()
        .enumerate()
        .map(|(r, row)| fit.second.fitted[r] + xi[obs[row.current].firm] * comp[r])
        .collect();
    ReplicateData { shares, y_star }
}

/// Refit both steps on replicate data with precomputed plans.
pub fn refit(panel: &PanelDataset, tech: &TechnologySpec, plans: &FitPlans, data: &ReplicateData, bw: Option<Bandwidths>) -> Result<EstimationResult> {
    refit_with_material(panel, tech, plans, data, None, bw)
}

/// With `material`, the replicate response is rebuilt on the output scale:
/// `y_star + material − m̂^b`, where `m̂^b` is the refit's own first-step
/// material part, so each model carries its own first-step error.
fn refit_with_material(
    panel: &PanelDataset,
    tech: &TechnologySpec,
    plans: &FitPlans,
    data: &ReplicateData,
    material: Option<&[f64]>,
    bw: Option<Bandwidths>,
) -> Result<EstimationResult> {
    let first = step1_with_plan(panel, &data.shares, tech, &plans.first, &plans.lagged)?;
    let mut rows = second_step_rows(panel, tech, &first, &plans.lagged)?;
    rows.response.clone_from(&data.y_star);
    if let Some(base) = material {
        for (r, row) in plans.lagged.iter().enumerate() {
            rows.response[r] += base[row.current] - first.material_part[row.current];
        }
    }
    let second = step2_with_plan(panel, tech, &rows, &plans.lagged, &plans.second)?;
    Ok(assemble(panel, tech, plans, first, second, bw))
}

/// Plans matching a completed fit: kernel plans with the same bandwidths and
/// extra targets, or uniform plans for the invariant estimator.
pub fn plans_for(panel: &PanelDataset, fit: &EstimationResult) -> Result<FitPlans> {
    match fit.bandwidths {
        Some(bw) => FitPlans::kernel(panel, bw, &fit.targets[fit.n_site_targets()..]),
        None => FitPlans::uniform(panel),
    }
}

pub fn wild_bootstrap(
    panel: &PanelDataset,
    fit: &EstimationResult,
    b: usize,
    seed: u64,
    functionals: &[Functional],
) -> Result<BootstrapDraws> {
    let plans = plans_for(panel, fit)?;
    wild_bootstrap_with_plans(panel, fit, &plans, b, seed, functionals)
}

pub fn wild_bootstrap_with_plans(
    panel: &PanelDataset,
    fit: &EstimationResult,
    plans: &FitPlans,
    b: usize,
    seed: u64,
    functionals: &[Functional],
) -> Result<BootstrapDraws> {
    if b == 0 {
        return Err(Error::InvalidArgument("bootstrap replicate count must be positive".into()));
    }
    let point: Vec<f64> = functionals.iter().map(|f| f.evaluate(fit)).collect();
    let outcomes: Vec<Option<Vec<f64>>> = (0..b)
        .into_par_iter()
        .map(|r| {
            let xi = firm_weights(panel.n_firms(), seed, r);
            let data = regenerate(panel, fit, &xi);
            let rep = refit(panel, &fit.tech, plans, &data, fit.bandwidths).ok()?;
            let vals: Vec<f64> = functionals.iter().map(|f| f.evaluate(&rep)).collect();
            vals.iter().all(|v| v.is_finite()).then_some(vals)
        })
        .collect();
    let mut replicates = Vec::new();
    let mut draws = Vec::new();
    let mut failed = Vec::new();
    for (r, o) in outcomes.into_iter().enumerate() {
        match o {
            Some(v) => {
                replicates.push(r);
                draws.push(v);
            }
            None => failed.push(r),
        }
    }
    if !failed.is_empty() {
        log::warn!("{} of {b} bootstrap replicates failed and were dropped", failed.len());
    }
    Ok(BootstrapDraws {
        requested: b,
        seed,
        functionals: functionals.to_vec(),
        point,
        replicates,
        draws,
        failed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Sidedness {
    #[default]
    TwoSided,
    /// [lower, +∞)
    LowerBound,
    /// (−∞, upper]
    UpperBound,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub level: f64,
    pub lower: f64,
    pub upper: f64,
    pub z0: f64,
    pub sidedness: Sidedness,
    pub bias_corrected: bool,
    /// All draws were identical.
    pub degenerate: bool,
    pub n_draws: usize,
}

impl ConfidenceInterval {
    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }
}

/// Smallest replicate count accepted by [`percentile_ci`].
pub const MIN_REPLICATES: usize = 50;

/// Percentile interval from bootstrap draws, with optional median-bias
/// correction. Quantiles interpolate linearly between order statistics.
pub fn percentile_ci(
    draws: &[f64],
    point: f64,
    alpha: f64,
    bias_correct: bool,
    sidedness: Sidedness,
) -> Result<ConfidenceInterval> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside (0, 1]")));
    }
    if draws.len() < MIN_REPLICATES {
        return Err(Error::InvalidArgument(format!(
            "{} successful replicates; at least {MIN_REPLICATES} needed",
            draws.len()
        )));
    }
    if draws.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite("bootstrap draw".into()));
    }
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let base = ConfidenceInterval {
        level: 1.0 - alpha,
        lower: sorted[0],
        upper: sorted[0],
        z0: 0.0,
        sidedness,
        bias_corrected: bias_correct,
        degenerate: true,
        n_draws: n,
    };
    if sorted[0] == sorted[n - 1] {
        return Ok(base);
    }
    let std = Normal::standard();
    let z0 = if bias_correct {
        let below = sorted.iter().filter(|d| **d < point).count() as f64;
        let lo = 1.0 / (2.0 * n as f64);
        std.inverse_cdf((below / n as f64).clamp(lo, 1.0 - lo))
    } else {
        0.0
    };
    let level = |p: f64| {
        if z0 == 0.0 {
            p
        } else {
            std.cdf(2.0 * z0 + std.inverse_cdf(p))
        }
    };
    let (lower, upper) = match sidedness {
        Sidedness::TwoSided => (
            quantile_sorted(&sorted, level(alpha / 2.0)),
            quantile_sorted(&sorted, level(1.0 - alpha / 2.0)),
        ),
        Sidedness::LowerBound => (quantile_sorted(&sorted, level(alpha)), f64::INFINITY),
        Sidedness::UpperBound => (f64::NEG_INFINITY, quantile_sorted(&sorted, level(1.0 - alpha))),
    };
    Ok(ConfidenceInterval {
        lower,
        upper,
        z0,
        degenerate: false,
        ..base
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceTestResult {
    pub statistic: f64,
    pub rss_restricted: f64,
    pub rss_unrestricted: f64,
    pub bootstrap: Vec<f64>,
    pub failed: usize,
    pub requested: usize,
    pub p_value: f64,
}

/// (RSS₀ − RSS₁)/RSS₁ from second-step residuals.
pub fn invariance_statistic(restricted: &EstimationResult, unrestricted: &EstimationResult) -> f64 {
    let (r0, r1) = (restricted.second_step_rss(), unrestricted.second_step_rss());
    (r0 - r1) / r1
}

/// Bootstrap test of location invariance. Replicates are generated under
/// the restricted fit; both models are refit on each replicate.
pub fn invariance_test(
    panel: &PanelDataset,
    bw: Bandwidths,
    tech: &TechnologySpec,
    b: usize,
    seed: u64,
) -> Result<InvarianceTestResult> {
    if b == 0 {
        return Err(Error::InvalidArgument("bootstrap replicate count must be positive".into()));
    }
    let restricted = estimate_invariant(panel, tech)?;
    let local_plans = FitPlans::kernel(panel, bw, &[])?;
    let uniform_plans = FitPlans::uniform(panel)?;
    let unrestricted = crate::estimator::fit_with_plans(panel, tech, &local_plans, &panel.shares(), Some(bw))?;
    let statistic = invariance_statistic(&restricted, &unrestricted);
    if !statistic.is_finite() {
        return Err(Error::NonFinite("invariance statistic".into()));
    }
    let stats: Vec<Option<f64>> = (0..b)
        .into_par_iter()
        .map(|r| {
            let xi = firm_weights(panel.n_firms(), seed, r);
            let data = regenerate(panel, &restricted, &xi);
            let base = Some(restricted.first.material_part.as_slice());
            let f0 = refit_with_material(panel, tech, &uniform_plans, &data, base, None).ok()?;
            let f1 = refit_with_material(panel, tech, &local_plans, &data, base, Some(bw)).ok()?;
            let t = invariance_statistic(&f0, &f1);
            t.is_finite().then_some(t)
        })
        .collect();
    let bootstrap: Vec<f64> = stats.iter().flatten().copied().collect();
    let failed = b - bootstrap.len();
    let exceed = bootstrap.iter().filter(|t| **t >= statistic).count();
    Ok(InvarianceTestResult {
        statistic,
        rss_restricted: restricted.second_step_rss(),
        rss_unrestricted: unrestricted.second_step_rss(),
        p_value: (exceed + 1) as f64 / (bootstrap.len() + 1) as f64,
        bootstrap,
        failed,
        requested: b,
    })
}

/// Long-format draws: functional id, replicate index, value.
pub fn write_draws_csv<W: Write>(draws: &BootstrapDraws, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["functional", "replicate", "value"])?;
    let ids: Vec<String> = draws.functionals.iter().map(Functional::id).collect();
    for (r, vals) in draws.replicates.iter().zip(&draws.draws) {
        for (id, v) in ids.iter().zip(vals) {
            w.write_record([id.clone(), r.to_string(), v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}
