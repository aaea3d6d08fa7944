//! Returns to scale and the counterfactual decomposition of mean
//! productivity differentials between a location and a benchmark into a
//! technology component and a TFP component.

use std::collections::BTreeSet;
use std::io::Write;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{EstimationResult, TechnologyForm, TechnologySpec};
use crate::panel::{Location, PanelDataset, PanelObservation};
use crate::stats::quantile;

/// Sum of output elasticities. Translog elasticities are evaluated at `at`.
pub fn returns_to_scale(tech: &TechnologySpec, material: &[f64], tech_coefs: &[f64], at: &PanelObservation) -> f64 {
    match tech.form {
        TechnologyForm::CobbDouglas => tech_coefs.iter().sum::<f64>() + material[0],
        TechnologyForm::Translog => {
            let (k, l, m) = (at.k, at.l, at.m);
            let (bk, bkk) = (tech_coefs[0], tech_coefs[1]);
            let (bm, bmm, bkm) = (material[0], material[1], material[2]);
            if tech.has_labor {
                let (bl, bll, bkl) = (tech_coefs[2], tech_coefs[3], tech_coefs[4]);
                let blm = material[3];
                let ek = bk + bkk * k + bkl * l + bkm * m;
                let el = bl + bll * l + bkl * k + blm * m;
                let em = bm + bmm * m + bkm * k + blm * l;
                ek + el + em
            } else {
                (bk + bkk * k + bkm * m) + (bm + bmm * m + bkm * k)
            }
        }
    }
}

/// Means of one location-period cell, or of the pooled location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationAggregate {
    pub site: usize,
    pub period: Option<i64>,
    pub n: usize,
    /// Mean fitted log output, y − η̂.
    pub y_bar: f64,
    pub k_bar: f64,
    pub l_bar: f64,
    pub m_bar: f64,
    pub omega_bar: f64,
}

impl LocationAggregate {
    fn as_observation(&self) -> PanelObservation {
        PanelObservation {
            firm: 0,
            period: self.period.unwrap_or(0),
            y: self.y_bar,
            k: self.k_bar,
            l: self.l_bar,
            m: self.m_bar,
            controls: vec![],
            site: self.site,
            v: 0.0,
            price_ratio: 0.0,
        }
    }
}

/// Cell means over observations with a recovered productivity value.
pub fn aggregate(panel: &PanelDataset, fit: &EstimationResult, site: usize, period: Option<i64>) -> Option<LocationAggregate> {
    let obs = panel.observations();
    let cell: Vec<usize> = panel.site_members()[site]
        .iter()
        .copied()
        .filter(|&i| period.is_none_or(|t| obs[i].period == t))
        .filter(|&i| fit.productivity.omega[i].is_finite())
        .collect();
    if cell.is_empty() {
        return None;
    }
    let n = cell.len() as f64;
    let avg = |f: &dyn Fn(usize) -> f64| cell.iter().map(|&i| f(i)).sum::<f64>() / n;
    Some(LocationAggregate {
        site,
        period,
        n: cell.len(),
        y_bar: avg(&|i| obs[i].y - fit.first.eta_hat[i]),
        k_bar: avg(&|i| obs[i].k),
        l_bar: avg(&|i| obs[i].l),
        m_bar: avg(&|i| obs[i].m),
        omega_bar: avg(&|i| fit.productivity.omega[i]),
    })
}

/// Location with the smallest pooled mean fitted output; ties go to the
/// lexicographically smallest coordinates.
pub fn select_benchmark(panel: &PanelDataset, fit: &EstimationResult) -> Option<usize> {
    let sites = panel.sites();
    (0..sites.len())
        .filter_map(|s| aggregate(panel, fit, s, None).map(|a| (s, a.y_bar)))
        .min_by(|a, b| {
            a.1.total_cmp(&b.1).then_with(|| lexicographic(&sites[a.0], &sites[b.0]))
        })
        .map(|(s, _)| s)
}

fn lexicographic(a: &Location, b: &Location) -> std::cmp::Ordering {
    for (x, y) in a.coords().iter().zip(b.coords()) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Equal => continue,
            o => return o,
        }
    }
    a.dim().cmp(&b.dim())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionRecord {
    pub site: usize,
    pub benchmark: usize,
    /// `None` for the pooled decomposition.
    pub period: Option<i64>,
    pub delta_prod: f64,
    pub delta_tech: f64,
    pub delta_tfp: f64,
    pub delta_y: f64,
    pub delta_k: f64,
    pub delta_l: f64,
    pub delta_m: f64,
    /// Δȳ − ΔPROD: the part of the mean output gap due to input differences.
    pub input_contribution: f64,
}

fn log_technology(tech: &TechnologySpec, fit: &EstimationResult, target: usize, at: &PanelObservation) -> Option<f64> {
    let c = fit.second.coefficients[target].as_ref()?;
    if !fit.first.valid[target] {
        return None;
    }
    Some(tech.tech_part(&c.tech, at) + tech.material_part(&fit.first.material[target], at))
}

/// Decompose the mean productivity gap of site `s` against benchmark `kappa`.
pub fn decompose(
    panel: &PanelDataset,
    fit: &EstimationResult,
    s: usize,
    kappa: usize,
    period: Option<i64>,
) -> Option<DecompositionRecord> {
    let (Some(a), Some(b)) = (aggregate(panel, fit, s, period), aggregate(panel, fit, kappa, period)) else {
        warn!("empty cell for site {s} or benchmark {kappa} at period {period:?}");
        return None;
    };
    let (ts, tk) = (fit.site_target[s], fit.site_target[kappa]);
    let at = b.as_observation();
    // The counterfactual: both technologies evaluated at the benchmark's
    // mean inputs.
    let delta_tech = log_technology(&fit.tech, fit, ts, &at)? - log_technology(&fit.tech, fit, tk, &at)?;
    let delta_tfp = a.omega_bar - b.omega_bar;
    let delta_prod = delta_tech + delta_tfp;
    let delta_y = a.y_bar - b.y_bar;
    Some(DecompositionRecord {
        site: s,
        benchmark: kappa,
        period,
        delta_prod,
        delta_tech,
        delta_tfp,
        delta_y,
        delta_k: a.k_bar - b.k_bar,
        delta_l: a.l_bar - b.l_bar,
        delta_m: a.m_bar - b.m_bar,
        input_contribution: delta_y - delta_prod,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BenchmarkRule {
    /// Smallest pooled mean fitted output.
    #[default]
    MinMeanOutput,
    Site(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub component: String,
    pub mean: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionTable {
    pub benchmark: Option<usize>,
    pub pooled: bool,
    pub records: Vec<DecompositionRecord>,
    /// Mean and quartiles over non-benchmark records.
    pub summary: Vec<SummaryRow>,
}

pub fn decomposition_table(
    panel: &PanelDataset,
    fit: &EstimationResult,
    rule: BenchmarkRule,
    pooled: bool,
) -> Result<DecompositionTable> {
    let empty = DecompositionTable {
        benchmark: None,
        pooled,
        records: vec![],
        summary: vec![],
    };
    if panel.sites().len() < 2 {
        warn!("single-location panel: nothing to decompose");
        return Ok(empty);
    }
    let kappa = match rule {
        BenchmarkRule::MinMeanOutput => select_benchmark(panel, fit),
        BenchmarkRule::Site(k) if k < panel.sites().len() => Some(k),
        BenchmarkRule::Site(k) => {
            return Err(Error::InvalidArgument(format!("benchmark site {k} out of range")))
        }
    };
    let Some(kappa) = kappa else {
        warn!("no location has recovered productivity");
        return Ok(empty);
    };
    let periods: Vec<Option<i64>> = if pooled {
        vec![None]
    } else {
        let set: BTreeSet<i64> = panel.observations().iter().map(|o| o.period).collect();
        set.into_iter().map(Some).collect()
    };
    let mut records = Vec::new();
    for t in &periods {
        for s in 0..panel.sites().len() {
            if let Some(r) = decompose(panel, fit, s, kappa, *t) {
                records.push(r);
            }
        }
    }
    let others: Vec<&DecompositionRecord> = records.iter().filter(|r| r.site != kappa).collect();
    let summary = if others.is_empty() {
        vec![]
    } else {
        let comps: [(&str, fn(&DecompositionRecord) -> f64); 4] = [
            ("delta_prod", |r| r.delta_prod),
            ("delta_tech", |r| r.delta_tech),
            ("delta_tfp", |r| r.delta_tfp),
            ("delta_y", |r| r.delta_y),
        ];
        comps
            .iter()
            .map(|(name, f)| {
                let v: Vec<f64> = others.iter().map(|r| f(r)).collect();
                SummaryRow {
                    component: name.to_string(),
                    mean: v.iter().sum::<f64>() / v.len() as f64,
                    q1: quantile(&v, 0.25),
                    median: quantile(&v, 0.5),
                    q3: quantile(&v, 0.75),
                }
            })
            .collect()
    };
    Ok(DecompositionTable {
        benchmark: Some(kappa),
        pooled,
        records,
        summary,
    })
}

/// One row per (location, period) with coordinates and all components.
pub fn write_decomposition_csv<W: Write>(panel: &PanelDataset, table: &DecompositionTable, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let dim = panel.sites().first().map_or(0, Location::dim);
    let mut header = vec!["location_id".to_string()];
    header.extend((0..dim).map(|d| format!("coord_{d}")));
    header.extend(
        [
            "period",
            "benchmark_id",
            "delta_prod",
            "delta_tech",
            "delta_tfp",
            "delta_y",
            "delta_k",
            "delta_l",
            "delta_m",
            "input_contribution",
        ]
        .map(String::from),
    );
    w.write_record(&header)?;
    for r in &table.records {
        let mut row = vec![r.site.to_string()];
        row.extend(panel.sites()[r.site].coords().iter().map(f64::to_string));
        row.push(r.period.map_or("pooled".to_string(), |t| t.to_string()));
        row.push(r.benchmark.to_string());
        row.extend(
            [
                r.delta_prod,
                r.delta_tech,
                r.delta_tfp,
                r.delta_y,
                r.delta_k,
                r.delta_l,
                r.delta_m,
                r.input_contribution,
            ]
            .iter()
            .map(f64::to_string),
        );
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::testutil::MicroDgp;
    use crate::estimator::{estimate_invariant, full_fit, Bandwidths};
    use proptest::prelude::*;

    fn fitted(seed: u64) -> (PanelDataset, EstimationResult) {
        let (panel, _) = MicroDgp {
            varying: true,
            sigma_eta: 0.05,
            sigma_zeta: 0.05,
            ..Default::default()
        }
        .generate(seed);
        let tech = TechnologySpec::for_panel(TechnologyForm::CobbDouglas, &panel);
        let fit = full_fit(&panel, Bandwidths { h1: 40, h2: 40 }, &tech).unwrap();
        (panel, fit)
    }

    #[test]
    fn rts_examples() {
        let tech = TechnologySpec::new(TechnologyForm::CobbDouglas, true, 0);
        let o = PanelObservation {
            firm: 0,
            period: 0,
            y: 0.0,
            k: 2.0,
            l: 1.0,
            m: 3.0,
            controls: vec![],
            site: 0,
            v: 0.0,
            price_ratio: 0.0,
        };
        assert!((returns_to_scale(&tech, &[0.5], &[0.1, 0.3], &o) - 0.9).abs() < 1e-15);
        let tl = TechnologySpec::new(TechnologyForm::Translog, true, 0);
        let r = returns_to_scale(&tl, &[0.5, 0.0, 0.0, 0.0], &[0.1, 0.0, 0.3, 0.0, 0.0], &o);
        assert!((r - 0.9).abs() < 1e-15);
    }

    #[test]
    fn rts_true_value_at_grid_start() {
        let s: f64 = 0.5;
        let rts = (0.2 + 0.1 * s) + (0.4 + 0.1 * (s * s).exp());
        assert!((rts - 0.7784).abs() < 1e-4);
    }

    #[test]
    fn benchmark_row_is_zero_and_rows_add_up() {
        let (panel, fit) = fitted(41);
        for pooled in [true, false] {
            let table = decomposition_table(&panel, &fit, BenchmarkRule::MinMeanOutput, pooled).unwrap();
            let kappa = table.benchmark.unwrap();
            for r in &table.records {
                assert!((r.delta_prod - r.delta_tech - r.delta_tfp).abs() <= 1e-12);
                if r.site == kappa {
                    assert_eq!((r.delta_prod, r.delta_tech, r.delta_tfp), (0.0, 0.0, 0.0));
                }
                // mean-output identity with Cobb-Douglas input terms
                let c = fit.second.coefficients[r.site].as_ref().unwrap();
                let inputs = c.tech[0] * r.delta_k + c.tech[1] * r.delta_l + fit.first.material[r.site][0] * r.delta_m;
                assert!((r.delta_y - (r.delta_prod + inputs)).abs() < 1e-10);
            }
            let mean = |f: fn(&SummaryRow) -> f64, name: &str| f(table.summary.iter().find(|s| s.component == name).unwrap());
            let lhs = mean(|s| s.mean, "delta_prod");
            let rhs = mean(|s| s.mean, "delta_tech") + mean(|s| s.mean, "delta_tfp");
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn invariant_fit_has_no_technology_gap() {
        let (panel, _) = fitted(42);
        let tech = TechnologySpec::for_panel(TechnologyForm::CobbDouglas, &panel);
        let inv = estimate_invariant(&panel, &tech).unwrap();
        let table = decomposition_table(&panel, &inv, BenchmarkRule::MinMeanOutput, true).unwrap();
        for r in &table.records {
            assert_eq!(r.delta_tech, 0.0);
            assert_eq!(r.delta_prod, r.delta_tfp);
        }
    }

    #[test]
    fn benchmark_selection_and_ties() {
        let (panel, fit) = fitted(43);
        let k = select_benchmark(&panel, &fit).unwrap();
        let yk = aggregate(&panel, &fit, k, None).unwrap().y_bar;
        for s in 0..panel.sites().len() {
            assert!(aggregate(&panel, &fit, s, None).unwrap().y_bar >= yk);
        }
        let a = Location::new(vec![0.1, 0.5]);
        let b = Location::new(vec![0.1, 0.7]);
        assert_eq!(lexicographic(&a, &b), std::cmp::Ordering::Less);
    }

    #[test]
    fn single_location_gives_empty_table() {
        let (panel, _) = MicroDgp {
            co_located: true,
            sigma_eta: 0.05,
            sigma_zeta: 0.05,
            ..Default::default()
        }
        .generate(44);
        let tech = TechnologySpec::for_panel(TechnologyForm::CobbDouglas, &panel);
        let fit = estimate_invariant(&panel, &tech).unwrap();
        let t = decomposition_table(&panel, &fit, BenchmarkRule::MinMeanOutput, true).unwrap();
        assert!(t.records.is_empty());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn tfp_gap_is_antisymmetric(seed in 0u64..50, s in 0usize..6, k in 0usize..6) {
            let (panel, fit) = fitted(seed);
            let a = decompose(&panel, &fit, s, k, None).unwrap();
            let b = decompose(&panel, &fit, k, s, None).unwrap();
            prop_assert!((a.delta_tfp + b.delta_tfp).abs() < 1e-12);
            prop_assert!((a.delta_prod - a.delta_tech - a.delta_tfp).abs() <= 1e-12);
        }
    }
}
