use std::fs::File;
use std::io::BufWriter;
use std::time::Instant;

use locprod::decomposition::{decomposition_table, write_decomposition_csv};
use locprod::estimator::{
    cross_validate, full_fit, write_location_csv, write_observation_csv, Bandwidths, CvResult, CvStep,
    EstimationResult, EstimationSummary, TechnologySpec,
};
use locprod::inference::{
    invariance_test, percentile_ci, wild_bootstrap, write_draws_csv, ConfidenceInterval, Functional,
};
use locprod::panel::{load_panel, PanelDataset, PanelMetadata};
use locprod::simulator::{
    coverage_study, run_monte_carlo, write_coverage_csv, write_monte_carlo_csv, write_power_csv, CoverageConfig,
};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{BandwidthChoice, BandwidthRule, RunConfig, SEED_VAR, WORKERS_VAR};
use crate::error::CliError;

type Result<T> = std::result::Result<T, CliError>;

pub fn dispatch(command: &str, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| CliError::io(&cfg.output_dir, e))?;
    let run = Run { command, cfg };
    match command {
        "estimate" => run.estimate(),
        "cv" => run.cv(),
        "infer" => run.infer(),
        "test-invariance" => run.test_invariance(),
        "decompose" => run.decompose(),
        "simulate" => run.simulate(),
        "coverage" => run.coverage(),
        other => Err(CliError::Config(format!("unknown command `{other}`"))),
    }
}

struct Run<'a> {
    command: &'a str,
    cfg: &'a RunConfig,
}

/// Geometric grid of candidate neighbor counts for a panel of `n` rows.
fn default_cv_grid(n: usize) -> Vec<usize> {
    let lo = (n as f64 / 50.0).max(5.0);
    let hi = (n as f64 / 2.0).max(lo);
    let steps = 8;
    let mut g: Vec<usize> = (0..steps)
        .map(|i| (lo * (hi / lo).powf(i as f64 / (steps - 1) as f64)).round() as usize)
        .collect();
    g.dedup();
    g
}

impl Run<'_> {
    fn path(&self, name: &str) -> std::path::PathBuf {
        self.cfg.output_dir.join(name)
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>> {
        let p = self.path(name);
        File::create(&p).map(BufWriter::new).map_err(|e| CliError::io(&p, e))
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let p = self.path(name);
        let mut text = serde_json::to_string_pretty(value).map_err(locprod::Error::from)?;
        text.push('\n');
        std::fs::write(&p, text).map_err(|e| CliError::io(&p, e))
    }

    fn manifest(&self, input: Option<&PanelMetadata>, artifacts: &[&str], result: Value) -> Result<()> {
        let m = json!({
            "tool": "locprod",
            "version": env!("CARGO_PKG_VERSION"),
            "command": self.command,
            "config": self.cfg,
            "environment": {
                SEED_VAR: std::env::var(SEED_VAR).ok(),
                WORKERS_VAR: std::env::var(WORKERS_VAR).ok(),
            },
            "input": input,
            "artifacts": artifacts,
            "result": result,
        });
        self.write_json("manifest.json", &m)
    }

    fn timing(&self, entries: Value) -> Result<()> {
        self.write_json("timing.json", &entries)
    }

    fn panel(&self) -> Result<PanelDataset> {
        let d = &self.cfg.data;
        let path = d
            .path
            .as_deref()
            .ok_or_else(|| CliError::Config("no input data: set data.path or pass --data".into()))?;
        let f = File::open(path).map_err(|e| CliError::io(path, e))?;
        Ok(load_panel(std::io::BufReader::new(f), &d.schema, d.log_transform, d.delimiter as u8)?)
    }

    fn tech(&self, panel: &PanelDataset) -> TechnologySpec {
        TechnologySpec::for_panel(self.cfg.estimation.technology, panel)
    }

    fn cv_grid(&self, panel: &PanelDataset) -> Vec<usize> {
        self.cfg
            .estimation
            .cv_grid
            .clone()
            .unwrap_or_else(|| default_cv_grid(panel.len()))
    }

    /// Neighbor counts per config, running cross-validation where asked.
    fn bandwidths(&self, panel: &PanelDataset) -> Result<(Bandwidths, Vec<CvResult>)> {
        let tech = self.tech(panel);
        let rule = Bandwidths::rule_of_thumb(panel.len());
        let mut cv = Vec::new();
        let h1 = match self.cfg.estimation.h1 {
            BandwidthChoice::Fixed(h) => h,
            BandwidthChoice::Rule(BandwidthRule::RuleOfThumb) => rule.h1,
            BandwidthChoice::Rule(BandwidthRule::Cv) => {
                let r = cross_validate(panel, CvStep::First, &self.cv_grid(panel), &tech, None)?;
                let h = r.chosen;
                cv.push(r);
                h
            }
        };
        let h2 = match self.cfg.estimation.h2 {
            BandwidthChoice::Fixed(h) => h,
            BandwidthChoice::Rule(BandwidthRule::RuleOfThumb) => rule.h2,
            BandwidthChoice::Rule(BandwidthRule::Cv) => {
                let r = cross_validate(panel, CvStep::Second, &self.cv_grid(panel), &tech, Some(h1))?;
                let h = r.chosen;
                cv.push(r);
                h
            }
        };
        Ok((Bandwidths { h1, h2 }, cv))
    }

    fn fit(&self, panel: &PanelDataset) -> Result<(EstimationResult, Vec<CvResult>)> {
        let (bw, cv) = self.bandwidths(panel)?;
        Ok((full_fit(panel, bw, &self.tech(panel))?, cv))
    }

    fn estimate(&self) -> Result<()> {
        let panel = self.panel()?;
        let (fit, cv) = self.fit(&panel)?;
        write_location_csv(&fit, &panel, self.create("locations.csv")?)?;
        write_observation_csv(&fit, &panel, self.create("observations.csv")?)?;
        self.manifest(
            Some(&panel.metadata()),
            &["locations.csv", "observations.csv"],
            json!({ "estimation": EstimationSummary::new(&fit, &panel), "cv": cv }),
        )
    }

    fn cv(&self) -> Result<()> {
        let panel = self.panel()?;
        let tech = self.tech(&panel);
        let grid = self.cv_grid(&panel);
        let first = cross_validate(&panel, CvStep::First, &grid, &tech, None)?;
        let second = cross_validate(&panel, CvStep::Second, &grid, &tech, Some(first.chosen))?;
        let mut w = csv::Writer::from_writer(self.create("cv.csv")?);
        w.write_record(["step", "h", "score", "skipped_locations", "chosen"])
            .map_err(locprod::Error::from)?;
        for r in [&first, &second] {
            let step = match r.step {
                CvStep::First => "first",
                CvStep::Second => "second",
            };
            for (i, h) in r.grid.iter().enumerate() {
                w.write_record([
                    step.to_string(),
                    h.to_string(),
                    r.scores[i].map_or(String::new(), |s| s.to_string()),
                    r.skipped[i].to_string(),
                    (*h == r.chosen).to_string(),
                ])
                .map_err(locprod::Error::from)?;
            }
        }
        w.flush().map_err(|e| CliError::io(&self.path("cv.csv"), e))?;
        self.manifest(
            Some(&panel.metadata()),
            &["cv.csv"],
            json!({ "h1": first.chosen, "h2": second.chosen }),
        )
    }

    fn infer(&self) -> Result<()> {
        let panel = self.panel()?;
        let (fit, _) = self.fit(&panel)?;
        let inf = &self.cfg.inference;
        let functionals = inf
            .functionals
            .clone()
            .unwrap_or_else(|| Functional::all_coefficients(&fit));
        let draws = wild_bootstrap(&panel, &fit, inf.replicates, self.cfg.seed, &functionals)?;
        let mut intervals: Vec<(String, f64, ConfidenceInterval)> = Vec::new();
        for (f, func) in functionals.iter().enumerate() {
            let ci = percentile_ci(&draws.column(f), draws.point[f], inf.alpha, inf.bias_correct, inf.sidedness)?;
            intervals.push((func.id(), draws.point[f], ci));
        }
        let mut w = csv::Writer::from_writer(self.create("intervals.csv")?);
        w.write_record(["functional", "estimate", "lower", "upper", "level", "z0", "degenerate", "n_draws"])
            .map_err(locprod::Error::from)?;
        for (id, point, ci) in &intervals {
            w.write_record([
                id.clone(),
                point.to_string(),
                ci.lower.to_string(),
                ci.upper.to_string(),
                ci.level.to_string(),
                ci.z0.to_string(),
                ci.degenerate.to_string(),
                ci.n_draws.to_string(),
            ])
            .map_err(locprod::Error::from)?;
        }
        w.flush().map_err(|e| CliError::io(&self.path("intervals.csv"), e))?;
        let mut artifacts = vec!["intervals.csv"];
        if inf.store_draws {
            write_draws_csv(&draws, self.create("draws.csv")?)?;
            artifacts.push("draws.csv");
        }
        self.manifest(
            Some(&panel.metadata()),
            &artifacts,
            json!({
                "bandwidths": fit.bandwidths,
                "requested": draws.requested,
                "failed_replicates": draws.failed,
                "exclusion_rate": draws.exclusion_rate(),
            }),
        )
    }

    fn test_invariance(&self) -> Result<()> {
        let panel = self.panel()?;
        let (bw, _) = self.bandwidths(&panel)?;
        let r = invariance_test(&panel, bw, &self.tech(&panel), self.cfg.inference.replicates, self.cfg.seed)?;
        let mut w = csv::Writer::from_writer(self.create("invariance_draws.csv")?);
        w.write_record(["draw", "statistic"]).map_err(locprod::Error::from)?;
        for (i, t) in r.bootstrap.iter().enumerate() {
            w.write_record([i.to_string(), t.to_string()]).map_err(locprod::Error::from)?;
        }
        w.flush().map_err(|e| CliError::io(&self.path("invariance_draws.csv"), e))?;
        let summary = json!({
            "statistic": r.statistic,
            "p_value": r.p_value,
            "rss_restricted": r.rss_restricted,
            "rss_unrestricted": r.rss_unrestricted,
            "requested": r.requested,
            "failed_replicates": r.failed,
            "bandwidths": bw,
        });
        self.write_json("invariance.json", &summary)?;
        self.manifest(Some(&panel.metadata()), &["invariance.json", "invariance_draws.csv"], summary)
    }

    fn decompose(&self) -> Result<()> {
        let panel = self.panel()?;
        let (fit, _) = self.fit(&panel)?;
        let d = &self.cfg.decomposition;
        let table = decomposition_table(&panel, &fit, d.benchmark, d.pooled)?;
        write_decomposition_csv(&panel, &table, self.create("decomposition.csv")?)?;
        let mut w = csv::Writer::from_writer(self.create("decomposition_summary.csv")?);
        w.write_record(["component", "mean", "q1", "median", "q3"])
            .map_err(locprod::Error::from)?;
        for s in &table.summary {
            w.write_record([
                s.component.clone(),
                s.mean.to_string(),
                s.q1.to_string(),
                s.median.to_string(),
                s.q3.to_string(),
            ])
            .map_err(locprod::Error::from)?;
        }
        w.flush().map_err(|e| CliError::io(&self.path("decomposition_summary.csv"), e))?;
        self.manifest(
            Some(&panel.metadata()),
            &["decomposition.csv", "decomposition_summary.csv"],
            json!({ "benchmark": table.benchmark, "pooled": table.pooled, "bandwidths": fit.bandwidths }),
        )
    }

    fn simulate(&self) -> Result<()> {
        let s = &self.cfg.simulation;
        let mut reports = Vec::new();
        let mut times = Vec::new();
        for &n in &s.sizes {
            for &est in &s.estimators {
                let start = Instant::now();
                reports.push(run_monte_carlo(&s.sim_config(n, self.cfg.seed), s.q, est, None)?);
                times.push(json!({ "n": n, "estimator": est, "seconds": start.elapsed().as_secs_f64() }));
            }
        }
        write_monte_carlo_csv(&reports, self.create("monte_carlo.csv")?)?;
        self.write_json("monte_carlo.json", &reports)?;
        self.timing(json!(times))?;
        let failures: Vec<Value> = reports
            .iter()
            .map(|r| json!({ "n": r.config.n_firms, "estimator": r.estimator, "failures": r.failures }))
            .collect();
        self.manifest(None, &["monte_carlo.csv", "monte_carlo.json"], json!({ "runs": failures }))
    }

    fn coverage(&self) -> Result<()> {
        let c = &self.cfg.coverage;
        let mut reports = Vec::new();
        let mut times = Vec::new();
        for &n in &c.sizes {
            let start = Instant::now();
            let cfg = CoverageConfig {
                sim: self.cfg.simulation.sim_config(n, self.cfg.seed),
                q: c.q,
                b: c.replicates,
                alpha: c.alpha,
                bias_correct: c.bias_correct,
                points: c.points.clone(),
                power_offsets: c.power_offsets.clone(),
            };
            reports.push(coverage_study(&cfg)?);
            times.push(json!({ "n": n, "seconds": start.elapsed().as_secs_f64() }));
        }
        write_coverage_csv(&reports, self.create("coverage.csv")?)?;
        write_power_csv(&reports, self.create("power.csv")?)?;
        self.write_json("coverage.json", &reports)?;
        self.timing(json!(times))?;
        let failures: Vec<Value> = reports
            .iter()
            .map(|r| json!({ "n": r.config.sim.n_firms, "completed": r.completed, "failures": r.failures }))
            .collect();
        self.manifest(None, &["coverage.csv", "power.csv", "coverage.json"], json!({ "runs": failures }))
    }
}
