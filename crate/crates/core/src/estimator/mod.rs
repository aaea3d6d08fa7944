//! Two-step estimation of locationally varying production functions.
//!
//! Step one smooths the log material share across space to obtain the
//! scaled material elasticity and the transitory shock. Step two fits the
//! proxied production function with a Markov productivity law by locally
//! weighted least squares. Coefficient surfaces are computed once per
//! unique site and shared by co-located observations.

mod cv;
mod invariant;
mod output;
mod step1;
mod step2;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{kernel_weights, Bandwidth, KernelSpec};
use crate::panel::{LaggedRow, Location, PanelDataset, PanelObservation};

pub use cv::{cross_validate, CvResult, CvStep};
pub use invariant::estimate_invariant;
pub use output::{write_location_csv, write_observation_csv, EstimationSummary};
pub use step1::{step1, step1_with_plan, FirstStepResult};
pub use step2::{second_step_rows, step2, step2_with_plan, LocationDiagnostics, SecondStepCoefficients, SecondStepResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TechnologyForm {
    #[default]
    CobbDouglas,
    Translog,
}

impl std::str::FromStr for TechnologyForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cobb-douglas" | "cobb_douglas" | "cd" => Ok(TechnologyForm::CobbDouglas),
            "translog" | "tl" => Ok(TechnologyForm::Translog),
            other => Err(Error::InvalidArgument(format!("unknown technology form `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TechnologySpec {
    pub form: TechnologyForm,
    pub has_labor: bool,
    /// Number of productivity controls G.
    pub control_dimension: usize,
}

impl TechnologySpec {
    pub fn new(form: TechnologyForm, has_labor: bool, control_dimension: usize) -> Self {
        TechnologySpec {
            form,
            has_labor,
            control_dimension,
        }
    }

    pub fn for_panel(form: TechnologyForm, panel: &PanelDataset) -> Self {
        Self::new(form, panel.has_labor(), panel.control_dimension())
    }

    pub fn check(&self, panel: &PanelDataset) -> Result<()> {
        if self.has_labor != panel.has_labor() {
            return Err(Error::InvalidArgument(
                "technology and panel disagree on the labor input".into(),
            ));
        }
        if self.control_dimension != panel.control_dimension() {
            return Err(Error::DimensionMismatch {
                expected: self.control_dimension,
                found: panel.control_dimension(),
            });
        }
        Ok(())
    }

    /// Names of the non-material technology coefficients, in storage order.
    pub fn tech_names(&self) -> Vec<&'static str> {
        match (self.form, self.has_labor) {
            (TechnologyForm::CobbDouglas, true) => vec!["beta_k", "beta_l"],
            (TechnologyForm::CobbDouglas, false) => vec!["beta_k"],
            (TechnologyForm::Translog, true) => vec!["beta_k", "beta_kk", "beta_l", "beta_ll", "beta_kl"],
            (TechnologyForm::Translog, false) => vec!["beta_k", "beta_kk"],
        }
    }

    /// Names of the material coefficients recovered in step one.
    pub fn material_names(&self) -> Vec<&'static str> {
        match (self.form, self.has_labor) {
            (TechnologyForm::CobbDouglas, _) => vec!["beta_m"],
            (TechnologyForm::Translog, true) => vec!["beta_m", "beta_mm", "beta_km", "beta_lm"],
            (TechnologyForm::Translog, false) => vec!["beta_m", "beta_mm", "beta_km"],
        }
    }

    pub fn n_tech(&self) -> usize {
        self.tech_names().len()
    }

    /// Regressors multiplying the non-material coefficients.
    pub fn tech_terms(&self, o: &PanelObservation) -> Vec<f64> {
        let (k, l) = (o.k, o.l);
        match (self.form, self.has_labor) {
            (TechnologyForm::CobbDouglas, true) => vec![k, l],
            (TechnologyForm::CobbDouglas, false) => vec![k],
            (TechnologyForm::Translog, true) => vec![k, 0.5 * k * k, l, 0.5 * l * l, k * l],
            (TechnologyForm::Translog, false) => vec![k, 0.5 * k * k],
        }
    }

    /// Regressors of the scaled material elasticity: (1, m, k[, l]).
    pub(crate) fn share_terms(&self, o: &PanelObservation) -> Vec<f64> {
        if self.has_labor {
            vec![1.0, o.m, o.k, o.l]
        } else {
            vec![1.0, o.m, o.k]
        }
    }

    /// Output elasticity of materials.
    pub fn material_elasticity(&self, material: &[f64], o: &PanelObservation) -> f64 {
        match self.form {
            TechnologyForm::CobbDouglas => material[0],
            TechnologyForm::Translog => self
                .share_terms(o)
                .iter()
                .zip(material)
                .map(|(x, b)| x * b)
                .sum(),
        }
    }

    /// Every production-function term involving materials.
    pub fn material_part(&self, material: &[f64], o: &PanelObservation) -> f64 {
        match self.form {
            TechnologyForm::CobbDouglas => material[0] * o.m,
            TechnologyForm::Translog => {
                let mut s = material[0] * o.m + 0.5 * material[1] * o.m * o.m + material[2] * o.k * o.m;
                if self.has_labor {
                    s += material[3] * o.l * o.m;
                }
                s
            }
        }
    }

    pub fn tech_part(&self, tech: &[f64], o: &PanelObservation) -> f64 {
        self.tech_terms(o).iter().zip(tech).map(|(x, b)| x * b).sum()
    }
}

/// Per-target kernel weights over the panel's sites.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingPlan {
    pub targets: Vec<Location>,
    pub bandwidths: Vec<Option<Bandwidth>>,
    /// `site_weights[t][u]`: weight of site `u` when fitting target `t`.
    pub site_weights: Vec<Vec<f64>>,
    /// Target holding each site's own coefficients.
    pub site_target: Vec<usize>,
}

impl SmoothingPlan {
    /// Adaptive kernel plan with the panel sites as the leading targets,
    /// followed by `extra` evaluation points.
    pub fn kernel(sites: &[Location], counts: &[usize], h: usize, extra: &[Location]) -> Result<Self> {
        let targets: Vec<Location> = sites.iter().chain(extra).cloned().collect();
        let spec = KernelSpec::gaussian(h);
        let fitted: Vec<_> = targets
            .par_iter()
            .map(|t| kernel_weights(t, sites, counts, spec))
            .collect::<Result<_>>()?;
        let (bandwidths, site_weights) = fitted
            .into_iter()
            .map(|w| (Some(w.bandwidth), w.site_weights))
            .unzip();
        Ok(SmoothingPlan {
            targets,
            bandwidths,
            site_weights,
            site_target: (0..sites.len()).collect(),
        })
    }

    /// A single target weighting every observation equally.
    pub fn uniform(sites: &[Location]) -> Self {
        let dim = sites.first().map_or(0, Location::dim);
        let mut centroid = vec![0.0; dim];
        for s in sites {
            for (c, x) in centroid.iter_mut().zip(s.coords()) {
                *c += x / sites.len() as f64;
            }
        }
        SmoothingPlan {
            targets: vec![Location::new(centroid)],
            bandwidths: vec![None],
            site_weights: vec![vec![1.0; sites.len()]],
            site_target: vec![0; sites.len()],
        }
    }

    pub fn n_targets(&self) -> usize {
        self.targets.len()
    }
}

/// Number of lagged rows whose current observation sits at each site.
pub fn lagged_site_counts(panel: &PanelDataset, lagged: &[LaggedRow]) -> Vec<usize> {
    let mut counts = vec![0; panel.sites().len()];
    for r in lagged {
        counts[panel.observations()[r.current].site] += 1;
    }
    counts
}

/// Smoothing parameters for both steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bandwidths {
    pub h1: usize,
    pub h2: usize,
}

impl Bandwidths {
    /// The simulation shortcut h = 0.3 (nT)^{4/5}, applied to both steps.
    pub fn rule_of_thumb(n_obs: usize) -> Self {
        let h = (0.3 * (n_obs as f64).powf(0.8)).round().max(1.0) as usize;
        Bandwidths { h1: h, h2: h }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProductivitySeries {
    /// ω̂ per observation; NaN where the site's second step failed.
    pub omega: Vec<f64>,
    /// ln F(x) at the site's coefficients, excluding ω and η.
    pub log_technology: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimationResult {
    pub tech: TechnologySpec,
    pub bandwidths: Option<Bandwidths>,
    pub targets: Vec<Location>,
    pub site_target: Vec<usize>,
    pub lagged: Vec<LaggedRow>,
    pub first: FirstStepResult,
    pub second: SecondStepResult,
    pub productivity: ProductivitySeries,
    pub first_radii: Vec<Option<Bandwidth>>,
    pub second_radii: Vec<Option<Bandwidth>>,
}

impl EstimationResult {
    /// Number of targets that are panel sites (extra evaluation points follow).
    pub fn n_site_targets(&self) -> usize {
        self.site_target.iter().copied().max().map_or(0, |m| m + 1)
    }

    pub fn target_of_observation(&self, panel: &PanelDataset, i: usize) -> usize {
        self.site_target[panel.observations()[i].site]
    }

    pub fn first_bandwidth(&self, target: usize) -> Option<Bandwidth> {
        self.first_radii[target]
    }

    pub fn second_bandwidth(&self, target: usize) -> Option<Bandwidth> {
        self.second_radii[target]
    }

    /// Sum of squared composite second-step residuals over lagged rows.
    pub fn second_step_rss(&self) -> f64 {
        self.second.residuals.iter().filter(|r| r.is_finite()).map(|r| r * r).sum()
    }
}

pub fn recover_productivity(
    panel: &PanelDataset,
    tech: &TechnologySpec,
    site_target: &[usize],
    first: &FirstStepResult,
    second: &SecondStepResult,
) -> ProductivitySeries {
    let (omega, log_technology) = panel
        .observations()
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let t = site_target[o.site];
            match &second.coefficients[t] {
                Some(c) if first.valid[t] => {
                    let lnf = tech.tech_part(&c.tech, o) + first.material_part[i];
                    (o.y - lnf - first.eta_hat[i], lnf)
                }
                _ => (f64::NAN, f64::NAN),
            }
        })
        .unzip();
    ProductivitySeries { omega, log_technology }
}

/// Both steps at fixed bandwidths, with coefficient surfaces also evaluated
/// at `extra_targets`.
pub fn full_fit_at(
    panel: &PanelDataset,
    bw: Bandwidths,
    tech: &TechnologySpec,
    extra_targets: &[Location],
) -> Result<EstimationResult> {
    let plans = FitPlans::kernel(panel, bw, extra_targets)?;
    fit_with_plans(panel, tech, &plans, &panel.shares(), Some(bw))
}

pub fn full_fit(panel: &PanelDataset, bw: Bandwidths, tech: &TechnologySpec) -> Result<EstimationResult> {
    full_fit_at(panel, bw, tech, &[])
}

/// Precomputed weights for both steps; reusable across bootstrap replicates
/// since weights depend on geography only.
#[derive(Debug, Clone)]
pub struct FitPlans {
    pub lagged: Vec<LaggedRow>,
    pub first: SmoothingPlan,
    pub second: SmoothingPlan,
}

impl FitPlans {
    pub fn kernel(panel: &PanelDataset, bw: Bandwidths, extra_targets: &[Location]) -> Result<Self> {
        let lagged = panel.build_lagged_rows();
        if lagged.is_empty() {
            return Err(Error::InvalidArgument("panel has no lagged rows".into()));
        }
        let first = SmoothingPlan::kernel(panel.sites(), &panel.site_counts(), bw.h1, extra_targets)?;
        let counts = lagged_site_counts(panel, &lagged);
        let second = SmoothingPlan::kernel(panel.sites(), &counts, bw.h2, extra_targets)?;
        Ok(FitPlans { lagged, first, second })
    }

    pub fn uniform(panel: &PanelDataset) -> Result<Self> {
        let lagged = panel.build_lagged_rows();
        if lagged.is_empty() {
            return Err(Error::InvalidArgument("panel has no lagged rows".into()));
        }
        let plan = SmoothingPlan::uniform(panel.sites());
        Ok(FitPlans {
            lagged,
            first: plan.clone(),
            second: plan,
        })
    }
}

/// Full two-step fit on given shares with precomputed plans.
pub fn fit_with_plans(
    panel: &PanelDataset,
    tech: &TechnologySpec,
    plans: &FitPlans,
    shares: &[f64],
    bandwidths: Option<Bandwidths>,
) -> Result<EstimationResult> {
    let first = step1_with_plan(panel, shares, tech, &plans.first, &plans.lagged)?;
    let rows = second_step_rows(panel, tech, &first, &plans.lagged)?;
    let second = step2_with_plan(panel, tech, &rows, &plans.lagged, &plans.second)?;
    Ok(assemble(panel, tech, plans, first, second, bandwidths))
}

pub(crate) fn assemble(
    panel: &PanelDataset,
    tech: &TechnologySpec,
    plans: &FitPlans,
    mut first: FirstStepResult,
    mut second: SecondStepResult,
    bandwidths: Option<Bandwidths>,
) -> EstimationResult {
    first.h = bandwidths.map(|b| b.h1);
    second.h = bandwidths.map(|b| b.h2);
    let productivity = recover_productivity(panel, tech, &plans.first.site_target, &first, &second);
    EstimationResult {
        tech: *tech,
        bandwidths,
        targets: plans.first.targets.clone(),
        site_target: plans.first.site_target.clone(),
        lagged: plans.lagged.clone(),
        first,
        second,
        productivity,
        first_radii: plans.first.bandwidths.clone(),
        second_radii: plans.second.bandwidths.clone(),
    }
}
