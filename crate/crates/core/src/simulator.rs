//! Synthetic panels with known locationally varying truth, Monte Carlo
//! error metrics and bootstrap coverage experiments.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{
    estimate_invariant, full_fit_at, Bandwidths, EstimationResult, SecondStepCoefficients, TechnologyForm,
    TechnologySpec,
};
use crate::inference::{percentile_ci, wild_bootstrap, Functional, Sidedness};
use crate::panel::{Location, PanelDataset, RawRecord};
use crate::rng::derive_seed;

const DEPRECIATION: [f64; 5] = [0.05, 0.075, 0.10, 0.125, 0.15];
const INVEST_CAPITAL: f64 = 0.8;
const INVEST_OMEGA: f64 = 0.1;

/// Coefficient surfaces of the data-generating process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TruthSurface {
    #[default]
    Varying,
    /// The varying surfaces frozen at one location.
    Invariant { at: f64 },
}

impl TruthSurface {
    fn point(&self, s: f64) -> f64 {
        match self {
            TruthSurface::Varying => s,
            TruthSurface::Invariant { at } => *at,
        }
    }

    pub fn beta_k(&self, s: f64) -> f64 {
        0.2 + 0.1 * self.point(s)
    }

    pub fn beta_m(&self, s: f64) -> f64 {
        let s = self.point(s);
        0.4 + 0.1 * (s * s).exp()
    }

    pub fn rho0(&self, s: f64) -> f64 {
        let s = self.point(s);
        0.5 + s - s * s
    }

    pub fn rho1(&self, _s: f64) -> f64 {
        0.7
    }
}

/// The 50-point location line 0.50, 0.51, …, 0.99.
pub fn default_grid() -> Vec<f64> {
    (50..100).map(|i| f64::from(i) / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n_firms: usize,
    pub periods: usize,
    pub seed: u64,
    pub truth: TruthSurface,
    pub sigma_eta: f64,
    pub sigma_zeta: f64,
    pub grid: Vec<f64>,
    /// `h = scale·(nT)^{4/5}` in both steps.
    pub h_scale: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_firms: 100,
            periods: 10,
            seed: 0,
            truth: TruthSurface::Varying,
            sigma_eta: 0.07,
            sigma_zeta: 0.04,
            grid: default_grid(),
            h_scale: 0.3,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_firms == 0 || self.periods < 2 {
            return Err(Error::InvalidArgument("need at least one firm and two periods".into()));
        }
        if self.grid.is_empty() || self.grid.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument("location grid must be non-empty and finite".into()));
        }
        if !(self.sigma_eta >= 0.0 && self.sigma_zeta >= 0.0) {
            return Err(Error::InvalidArgument("noise scales must be non-negative".into()));
        }
        if !(self.h_scale > 0.0) {
            return Err(Error::InvalidArgument("h_scale must be positive".into()));
        }
        for &s in &self.grid {
            let bm = self.truth.beta_m(s);
            if !(bm > 0.0 && bm < 1.0) {
                return Err(Error::InvalidArgument(format!("beta_m({s}) = {bm} outside (0, 1)")));
            }
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        SimConfig { seed, ..self.clone() }
    }

    /// Bandwidth shortcut shared by both steps.
    pub fn shortcut_bandwidths(&self) -> Bandwidths {
        let h = (self.h_scale * ((self.n_firms * self.periods) as f64).powf(0.8)).round().max(1.0) as usize;
        Bandwidths { h1: h, h2: h }
    }

    pub fn technology(&self) -> TechnologySpec {
        TechnologySpec::new(TechnologyForm::CobbDouglas, false, 0)
    }
}

/// Per-observation draws aligned with the panel's observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTruth {
    pub truth: TruthSurface,
    /// Location of each firm.
    pub firm_location: Vec<f64>,
    pub omega: Vec<f64>,
    pub eta: Vec<f64>,
    /// Zero in each firm's first period.
    pub zeta: Vec<f64>,
}

impl SimTruth {
    pub fn beta_k(&self, s: f64) -> f64 {
        self.truth.beta_k(s)
    }

    /// Across-grid average of β_K.
    pub fn mean_beta_k(&self, grid: &[f64]) -> f64 {
        grid.iter().map(|&s| self.truth.beta_k(s)).sum::<f64>() / grid.len() as f64
    }
}

/// Draw one panel. Firms are placed uniformly on the grid; productivity
/// starts at `rho0(S)` and follows the AR(1) law; materials solve the
/// static first-order condition with the material price set to θ.
pub fn generate_panel(config: &SimConfig) -> Result<(PanelDataset, SimTruth)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let theta = (config.sigma_eta * config.sigma_eta / 2.0).exp();
    let n_obs = config.n_firms * config.periods;
    let mut records = Vec::with_capacity(n_obs);
    let mut truth = SimTruth {
        truth: config.truth,
        firm_location: Vec::with_capacity(config.n_firms),
        omega: Vec::with_capacity(n_obs),
        eta: Vec::with_capacity(n_obs),
        zeta: Vec::with_capacity(n_obs),
    };
    let tr = config.truth;
    for i in 0..config.n_firms {
        let s = config.grid[rng.random_range(0..config.grid.len())];
        let delta = DEPRECIATION[rng.random_range(0..DEPRECIATION.len())];
        let mut capital: f64 = rng.random_range(10.0..200.0);
        let (bk, bm, r0, r1) = (tr.beta_k(s), tr.beta_m(s), tr.rho0(s), tr.rho1(s));
        truth.firm_location.push(s);
        let mut omega = r0;
        for t in 0..config.periods {
            let zeta = if t == 0 {
                0.0
            } else {
                config.sigma_zeta * rng.sample::<f64, _>(StandardNormal)
            };
            if t > 0 {
                omega = r0 + r1 * omega + zeta;
            }
            let eta = config.sigma_eta * rng.sample::<f64, _>(StandardNormal);
            let k = capital.ln();
            let m = (bm.ln() + bk * k + omega) / (1.0 - bm);
            let y = bk * k + bm * m + omega + eta;
            records.push(RawRecord {
                firm_id: format!("f{i:05}"),
                period: t as i64 + 1,
                y,
                k,
                l: 0.0,
                m,
                controls: vec![],
                coords: vec![s],
                price_ratio: Some(theta.ln()),
                v: None,
            });
            truth.omega.push(omega);
            truth.eta.push(eta);
            truth.zeta.push(zeta);
            capital = capital.powf(INVEST_CAPITAL) * (INVEST_OMEGA * omega).exp() + (1.0 - delta) * capital;
        }
    }
    let panel = PanelDataset::from_records(records, vec![], false)?;
    Ok((panel, truth))
}

/// Grid points not occupied by any firm, as extra evaluation targets.
pub fn unoccupied_grid(panel: &PanelDataset, grid: &[f64]) -> Vec<Location> {
    grid.iter()
        .filter(|&&g| !panel.sites().iter().any(|s| s.coords()[0] == g))
        .map(|&g| Location::new(vec![g]))
        .collect()
}

/// Target index of each grid point in a fit that covers the grid.
pub fn grid_targets(fit: &EstimationResult, grid: &[f64]) -> Result<Vec<usize>> {
    grid.iter()
        .map(|&g| {
            fit.targets
                .iter()
                .position(|t| t.coords()[0] == g)
                .ok_or_else(|| Error::InvalidArgument(format!("grid point {g} is not a fit target")))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    Kernel,
    SampleSplitting,
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kernel" => Ok(EstimatorKind::Kernel),
            "sample-splitting" => Ok(EstimatorKind::SampleSplitting),
            _ => Err(Error::InvalidArgument(format!("unknown estimator `{s}`"))),
        }
    }
}

/// Parametric fit on one location's observations only.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitLocation {
    pub site: usize,
    pub n_obs: usize,
    pub beta_m: Option<f64>,
    pub coefficients: Option<SecondStepCoefficients>,
    pub flag: Option<String>,
}

/// Location-by-location invariant fits. Locations whose lagged rows do not
/// exceed the parameter count are flagged rather than fit.
pub fn sample_splitting_estimator(panel: &PanelDataset, tech: &TechnologySpec) -> Result<Vec<SplitLocation>> {
    tech.check(panel)?;
    let n_params = tech.n_tech() + 2 + tech.control_dimension;
    let lagged = panel.build_lagged_rows();
    let obs = panel.observations();
    let mut rows_at = vec![0usize; panel.sites().len()];
    for r in &lagged {
        rows_at[obs[r.current].site] += 1;
    }
    Ok(panel
        .site_members()
        .par_iter()
        .enumerate()
        .map(|(site, members)| {
            let flagged = |msg: String| SplitLocation {
                site,
                n_obs: members.len(),
                beta_m: None,
                coefficients: None,
                flag: Some(msg),
            };
            if rows_at[site] <= n_params {
                return flagged(format!("insufficient data: {} lagged rows for {n_params} parameters", rows_at[site]));
            }
            let fit = panel.subset(members).and_then(|sub| estimate_invariant(&sub, tech));
            match fit {
                Ok(fit) => match &fit.second.coefficients[0] {
                    Some(c) if fit.first.valid[0] => SplitLocation {
                        site,
                        n_obs: members.len(),
                        beta_m: Some(fit.first.material[0][0]),
                        coefficients: Some(c.clone()),
                        flag: None,
                    },
                    _ => flagged(fit.second.diagnostics[0].failure.clone().unwrap_or_else(|| "invalid first step".into())),
                },
                Err(e) => flagged(e.to_string()),
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct ErrorMetrics {
    pub bias: f64,
    pub rmse: f64,
    pub mae: f64,
}

impl ErrorMetrics {
    pub fn from_errors(errors: &[f64]) -> Self {
        let n = errors.len() as f64;
        ErrorMetrics {
            bias: errors.iter().sum::<f64>() / n,
            rmse: (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt(),
            mae: errors.iter().map(|e| e.abs()).sum::<f64>() / n,
        }
    }

    fn average(items: &[ErrorMetrics]) -> Self {
        let n = items.len() as f64;
        ErrorMetrics {
            bias: items.iter().map(|m| m.bias).sum::<f64>() / n,
            rmse: items.iter().map(|m| m.rmse).sum::<f64>() / n,
            mae: items.iter().map(|m| m.mae).sum::<f64>() / n,
        }
    }
}

/// Parameters tracked by the Monte Carlo harness, in report order.
pub const MC_PARAMETERS: [&str; 4] = ["beta_k", "rho0", "rho1", "beta_m"];

/// Firm-level errors of one simulated panel, averaged over firms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationOutcome {
    pub seed: u64,
    pub metrics: Vec<ErrorMetrics>,
    /// Firms at flagged locations, left out of the metrics.
    pub excluded_firms: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub estimator: EstimatorKind,
    pub config: SimConfig,
    pub bandwidths: Option<Bandwidths>,
    pub q: usize,
    pub parameters: Vec<String>,
    /// Averages over successful simulations, aligned with `parameters`.
    pub metrics: Vec<ErrorMetrics>,
    pub failures: usize,
    pub simulations: Vec<SimulationOutcome>,
}

impl MonteCarloReport {
    pub fn metric(&self, parameter: &str) -> Option<ErrorMetrics> {
        self.parameters.iter().position(|p| p == parameter).map(|i| self.metrics[i])
    }
}

/// Per-firm estimates of (β_K, ρ0, ρ1, β_M); `None` for flagged locations.
fn firm_estimates(
    panel: &PanelDataset,
    config: &SimConfig,
    estimator: EstimatorKind,
    bw: Bandwidths,
) -> Result<Vec<Option<[f64; 4]>>> {
    let tech = config.technology();
    let per_site: Vec<Option<[f64; 4]>> = match estimator {
        EstimatorKind::Kernel => {
            let fit = full_fit_at(panel, bw, &tech, &[])?;
            (0..panel.sites().len())
                .map(|s| {
                    let t = fit.site_target[s];
                    let c = fit.second.coefficients[t].as_ref().filter(|_| fit.first.valid[t])?;
                    Some([c.tech[0], c.rho0, c.rho1, fit.first.material[t][0]])
                })
                .collect()
        }
        EstimatorKind::SampleSplitting => sample_splitting_estimator(panel, &tech)?
            .into_iter()
            .map(|loc| {
                let c = loc.coefficients?;
                Some([c.tech[0], c.rho0, c.rho1, loc.beta_m?])
            })
            .collect(),
    };
    let mut firm_site = vec![0; panel.n_firms()];
    for o in panel.observations() {
        firm_site[o.firm] = o.site;
    }
    Ok(firm_site.into_iter().map(|s| per_site[s]).collect())
}

fn simulate_once(config: &SimConfig, estimator: EstimatorKind, bw: Bandwidths) -> Result<SimulationOutcome> {
    let (panel, truth) = generate_panel(config)?;
    let est = firm_estimates(&panel, config, estimator, bw)?;
    let tr = config.truth;
    let mut errors: [Vec<f64>; 4] = Default::default();
    let mut excluded = 0;
    for (firm, e) in est.iter().enumerate() {
        let s = truth.firm_location[firm];
        match e {
            Some(e) => {
                let target = [tr.beta_k(s), tr.rho0(s), tr.rho1(s), tr.beta_m(s)];
                for j in 0..4 {
                    errors[j].push(e[j] - target[j]);
                }
            }
            None => excluded += 1,
        }
    }
    if errors[0].is_empty() {
        return Err(Error::Estimation("every location was flagged".into()));
    }
    Ok(SimulationOutcome {
        seed: config.seed,
        metrics: errors.iter().map(|e| ErrorMetrics::from_errors(e)).collect(),
        excluded_firms: excluded,
    })
}

/// Largest tolerated share of failed simulations.
pub const MAX_FAILURE_RATE: f64 = 0.02;

/// `q` independent panels from seeds derived from `config.seed`. Bandwidths
/// default to the shortcut rule.
pub fn run_monte_carlo(
    config: &SimConfig,
    q: usize,
    estimator: EstimatorKind,
    bandwidths: Option<Bandwidths>,
) -> Result<MonteCarloReport> {
    config.validate()?;
    if q == 0 {
        return Err(Error::InvalidArgument("simulation count must be positive".into()));
    }
    let bw = bandwidths.unwrap_or_else(|| config.shortcut_bandwidths());
    let outcomes: Vec<Result<SimulationOutcome>> = (0..q)
        .into_par_iter()
        .map(|r| simulate_once(&config.with_seed(derive_seed(config.seed, r as u64)), estimator, bw))
        .collect();
    let mut simulations = Vec::with_capacity(q);
    let mut failures = 0;
    for (r, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(o) => simulations.push(o),
            Err(e) => {
                log::warn!("simulation {r} failed: {e}");
                failures += 1;
            }
        }
    }
    if failures as f64 > MAX_FAILURE_RATE * q as f64 {
        return Err(Error::Estimation(format!("{failures} of {q} simulations failed")));
    }
    let metrics = (0..MC_PARAMETERS.len())
        .map(|j| ErrorMetrics::average(&simulations.iter().map(|s| s.metrics[j]).collect::<Vec<_>>()))
        .collect();
    Ok(MonteCarloReport {
        estimator,
        config: config.clone(),
        bandwidths: (estimator == EstimatorKind::Kernel).then_some(bw),
        q,
        parameters: MC_PARAMETERS.iter().map(|s| s.to_string()).collect(),
        metrics,
        failures,
        simulations,
    })
}

/// Table layout: one row per (n, estimator, metric), one column per parameter.
pub fn write_monte_carlo_csv<W: Write>(reports: &[MonteCarloReport], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["n".to_string(), "T".to_string(), "estimator".to_string(), "metric".to_string()];
    header.extend(MC_PARAMETERS.iter().map(|s| s.to_string()));
    w.write_record(&header)?;
    for r in reports {
        let est = match r.estimator {
            EstimatorKind::Kernel => "kernel",
            EstimatorKind::SampleSplitting => "sample-splitting",
        };
        for (label, get) in [
            ("mean_bias", (|m: &ErrorMetrics| m.bias) as fn(&ErrorMetrics) -> f64),
            ("rmse", |m| m.rmse),
            ("mae", |m| m.mae),
        ] {
            let mut row = vec![
                r.config.n_firms.to_string(),
                r.config.periods.to_string(),
                est.to_string(),
                label.to_string(),
            ];
            row.extend(r.metrics.iter().map(|m| get(m).to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoverageConfig {
    pub sim: SimConfig,
    pub q: usize,
    pub b: usize,
    pub alpha: f64,
    pub bias_correct: bool,
    /// Locations at which β_K intervals are tracked.
    pub points: Vec<f64>,
    /// Offsets from the truth at which rejection frequencies are recorded.
    pub power_offsets: Vec<f64>,
}

impl Default for CoverageConfig {
    fn default() -> Self {
        CoverageConfig {
            sim: SimConfig {
                n_firms: 200,
                ..Default::default()
            },
            q: 100,
            b: 199,
            alpha: 0.05,
            bias_correct: true,
            points: vec![0.65, 0.75, 0.85],
            power_offsets: (-10..=10).map(|i| f64::from(i) * 0.01).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub functional: String,
    pub truth: f64,
    pub coverage: f64,
    pub mean_lower: f64,
    pub mean_upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerPoint {
    pub functional: String,
    pub null_value: f64,
    pub rejection_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub config: CoverageConfig,
    pub bandwidths: Bandwidths,
    pub rows: Vec<CoverageRow>,
    pub power: Vec<PowerPoint>,
    pub failures: usize,
    /// Successful simulations entering the frequencies.
    pub completed: usize,
}

/// (lower, upper) per tracked functional for one simulation.
fn coverage_once(cfg: &CoverageConfig, sim: &SimConfig, bw: Bandwidths) -> Result<Vec<(f64, f64)>> {
    let (panel, _) = generate_panel(sim)?;
    let extra = unoccupied_grid(&panel, &sim.grid);
    let fit = full_fit_at(&panel, bw, &sim.technology(), &extra)?;
    let all = grid_targets(&fit, &sim.grid)?;
    let mut functionals = vec![Functional::MeanCoefficient {
        name: "beta_k".into(),
        targets: all.clone(),
    }];
    for &p in &cfg.points {
        let g = sim
            .grid
            .iter()
            .position(|&g| (g - p).abs() < 1e-9)
            .ok_or_else(|| Error::InvalidArgument(format!("point {p} is not on the grid")))?;
        functionals.push(Functional::Coefficient {
            name: "beta_k".into(),
            target: all[g],
        });
    }
    let draws = wild_bootstrap(&panel, &fit, cfg.b, derive_seed(sim.seed, u64::MAX), &functionals)?;
    (0..functionals.len())
        .map(|f| {
            let ci = percentile_ci(&draws.column(f), draws.point[f], cfg.alpha, cfg.bias_correct, Sidedness::TwoSided)?;
            Ok((ci.lower, ci.upper))
        })
        .collect()
}

/// Coverage of two-sided intervals for the across-grid mean of β_K and for
/// β_K at `points`, plus rejection frequencies against shifted nulls.
pub fn coverage_study(cfg: &CoverageConfig) -> Result<CoverageReport> {
    cfg.sim.validate()?;
    if cfg.q == 0 || cfg.b == 0 {
        return Err(Error::InvalidArgument("simulation and replicate counts must be positive".into()));
    }
    let bw = cfg.sim.shortcut_bandwidths();
    let outcomes: Vec<Result<Vec<(f64, f64)>>> = (0..cfg.q)
        .into_par_iter()
        .map(|r| coverage_once(cfg, &cfg.sim.with_seed(derive_seed(cfg.sim.seed, r as u64)), bw))
        .collect();
    let mut intervals = Vec::new();
    let mut failures = 0;
    for (r, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(v) => intervals.push(v),
            Err(e) => {
                log::warn!("coverage simulation {r} failed: {e}");
                failures += 1;
            }
        }
    }
    if intervals.is_empty() || failures as f64 > MAX_FAILURE_RATE * cfg.q as f64 {
        return Err(Error::Estimation(format!("{failures} of {} simulations failed", cfg.q)));
    }
    let tr = cfg.sim.truth;
    let mut names = vec!["mean_beta_k".to_string()];
    let mut truths = vec![cfg.sim.grid.iter().map(|&s| tr.beta_k(s)).sum::<f64>() / cfg.sim.grid.len() as f64];
    for &p in &cfg.points {
        names.push(format!("beta_k@{p}"));
        truths.push(tr.beta_k(p));
    }
    let n = intervals.len() as f64;
    let freq = |f: usize, x: f64| intervals.iter().filter(|v| v[f].0 <= x && x <= v[f].1).count() as f64 / n;
    let rows = names
        .iter()
        .enumerate()
        .map(|(f, name)| CoverageRow {
            functional: name.clone(),
            truth: truths[f],
            coverage: freq(f, truths[f]),
            mean_lower: intervals.iter().map(|v| v[f].0).sum::<f64>() / n,
            mean_upper: intervals.iter().map(|v| v[f].1).sum::<f64>() / n,
        })
        .collect();
    let truths = &truths;
    let power = names
        .iter()
        .enumerate()
        .flat_map(|(f, name)| {
            cfg.power_offsets.iter().map(move |d| (f, name, truths[f] + d))
        })
        .map(|(f, name, x)| PowerPoint {
            functional: name.clone(),
            null_value: x,
            rejection_rate: 1.0 - freq(f, x),
        })
        .collect();
    Ok(CoverageReport {
        config: cfg.clone(),
        bandwidths: bw,
        rows,
        power,
        failures,
        completed: intervals.len(),
    })
}

/// One row per n with one coverage column per functional.
pub fn write_coverage_csv<W: Write>(reports: &[CoverageReport], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let Some(first) = reports.first() else {
        w.flush()?;
        return Ok(());
    };
    let mut header = vec!["n".to_string(), "truth".to_string()];
    header.extend(first.rows.iter().map(|r| r.functional.clone()));
    w.write_record(&header)?;
    for r in reports {
        let truth = match r.config.sim.truth {
            TruthSurface::Varying => "varying".to_string(),
            TruthSurface::Invariant { .. } => "invariant".to_string(),
        };
        let mut row = vec![r.config.sim.n_firms.to_string(), truth];
        row.extend(r.rows.iter().map(|x| x.coverage.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Rejection frequencies against shifted nulls, one row per (n, functional, null).
pub fn write_power_csv<W: Write>(reports: &[CoverageReport], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["n", "functional", "null_value", "rejection_rate"])?;
    for r in reports {
        for p in &r.power {
            w.write_record([
                r.config.sim.n_firms.to_string(),
                p.functional.clone(),
                p.null_value.to_string(),
                p.rejection_rate.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
