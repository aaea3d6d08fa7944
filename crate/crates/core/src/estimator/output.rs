use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{Bandwidths, EstimationResult, TechnologySpec};
use crate::decomposition::{aggregate, returns_to_scale};
use crate::error::Result;
use crate::panel::PanelDataset;

/// Scalar summary of a fit for run manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationSummary {
    pub technology: TechnologySpec,
    pub bandwidths: Option<Bandwidths>,
    pub theta: f64,
    pub n_observations: usize,
    pub n_lagged_rows: usize,
    pub n_targets: usize,
    pub flagged_targets: Vec<usize>,
    pub nonconverged_targets: Vec<usize>,
    pub second_step_rss: f64,
}

impl EstimationSummary {
    pub fn new(fit: &EstimationResult, panel: &PanelDataset) -> Self {
        let flagged_targets = (0..fit.targets.len())
            .filter(|&t| fit.second.coefficients[t].is_none() || !fit.first.valid[t])
            .collect();
        let nonconverged_targets = fit
            .second
            .diagnostics
            .iter()
            .enumerate()
            .filter(|(_, d)| d.failure.is_none() && !d.converged)
            .map(|(t, _)| t)
            .collect();
        EstimationSummary {
            technology: fit.tech,
            bandwidths: fit.bandwidths,
            theta: fit.first.theta,
            n_observations: panel.len(),
            n_lagged_rows: fit.lagged.len(),
            n_targets: fit.targets.len(),
            flagged_targets,
            nonconverged_targets,
            second_step_rss: fit.second_step_rss(),
        }
    }
}

fn fmt(x: f64) -> String {
    if x.is_finite() {
        x.to_string()
    } else {
        String::new()
    }
}

/// Coefficient surfaces, one row per target.
pub fn write_location_csv<W: Write>(fit: &EstimationResult, panel: &PanelDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let tech = &fit.tech;
    let dim = fit.targets.first().map_or(0, |t| t.dim());
    let n_sites = fit.n_site_targets();
    let mut header = vec!["location_id".to_string(), "is_site".to_string()];
    header.extend((0..dim).map(|d| format!("coord_{d}")));
    header.extend(["n_obs", "radius_h1", "radius_h2", "b_m"].map(String::from));
    header.extend(tech.material_names().iter().map(|s| s.to_string()));
    header.extend(tech.tech_names().iter().map(|s| s.to_string()));
    header.extend(["rho0".to_string(), "rho1".to_string()]);
    header.extend(panel.control_names().iter().map(|c| format!("rho2_{c}")));
    header.extend(
        ["rts", "converged", "iterations", "weighted_rss", "condition", "flag"].map(String::from),
    );
    w.write_record(&header)?;

    let counts = panel.site_counts();
    for (t, loc) in fit.targets.iter().enumerate() {
        let site = fit.site_target.iter().position(|&x| x == t);
        let mut row = vec![t.to_string(), (t < n_sites).to_string()];
        row.extend(loc.coords().iter().map(|x| x.to_string()));
        let n_obs: usize = fit
            .site_target
            .iter()
            .enumerate()
            .filter(|(_, &x)| x == t)
            .map(|(s, _)| counts[s])
            .sum();
        row.push(n_obs.to_string());
        let radius = |b: Option<crate::kernel::Bandwidth>| b.map_or(String::new(), |b| fmt(b.radius));
        row.push(radius(fit.first_bandwidth(t)));
        row.push(radius(fit.second_bandwidth(t)));
        row.push(fmt(fit.first.b_m[t]));
        row.extend(fit.first.material[t].iter().map(|x| fmt(*x)));
        let diag = &fit.second.diagnostics[t];
        match &fit.second.coefficients[t] {
            Some(c) => {
                row.extend(c.tech.iter().map(|x| fmt(*x)));
                row.push(fmt(c.rho0));
                row.push(fmt(c.rho1));
                row.extend(c.rho2.iter().map(|x| fmt(*x)));
                // translog elasticities at the location's mean inputs
                let at = site.and_then(|s| aggregate(panel, fit, s, None)).map(|a| crate::panel::PanelObservation {
                    firm: 0,
                    period: 0,
                    y: a.y_bar,
                    k: a.k_bar,
                    l: a.l_bar,
                    m: a.m_bar,
                    controls: vec![],
                    site: a.site,
                    v: 0.0,
                    price_ratio: 0.0,
                });
                let rts = match (tech.form, at) {
                    (super::TechnologyForm::CobbDouglas, _) => {
                        let zero = panel.observations()[0].clone();
                        returns_to_scale(tech, &fit.first.material[t], &c.tech, &zero)
                    }
                    (_, Some(at)) => returns_to_scale(tech, &fit.first.material[t], &c.tech, &at),
                    (_, None) => f64::NAN,
                };
                row.push(fmt(rts));
            }
            None => {
                let blanks = tech.n_tech() + 2 + panel.control_dimension() + 1;
                row.extend(std::iter::repeat_n(String::new(), blanks));
            }
        }
        row.push(diag.converged.to_string());
        row.push(diag.iterations.to_string());
        row.push(fmt(diag.weighted_rss));
        row.push(fmt(diag.condition));
        row.push(diag.failure.clone().unwrap_or_default());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Productivity, shocks and fitted values, one row per observation.
pub fn write_observation_csv<W: Write>(fit: &EstimationResult, panel: &PanelDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "firm_id",
        "period",
        "location_id",
        "y",
        "omega_hat",
        "eta_hat",
        "log_technology",
        "fitted_output",
        "y_star",
        "material_elasticity",
    ])?;
    for (i, o) in panel.observations().iter().enumerate() {
        let t = fit.site_target[o.site];
        let elasticity = fit.tech.material_elasticity(&fit.first.material[t], o);
        w.write_record([
            panel.firm_ids()[o.firm].clone(),
            o.period.to_string(),
            t.to_string(),
            fmt(o.y),
            fmt(fit.productivity.omega[i]),
            fmt(fit.first.eta_hat[i]),
            fmt(fit.productivity.log_technology[i]),
            fmt(o.y - fit.first.eta_hat[i]),
            fmt(fit.first.y_star[i]),
            fmt(elasticity),
        ])?;
    }
    w.flush()?;
    Ok(())
}
