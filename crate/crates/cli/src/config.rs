use std::path::{Path, PathBuf};

use locprod::decomposition::BenchmarkRule;
use locprod::estimator::TechnologyForm;
use locprod::inference::{Functional, Sidedness};
use locprod::simulator::{default_grid, CoverageConfig, EstimatorKind, SimConfig, TruthSurface};
use locprod::ColumnSchema;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SEED_VAR: &str = "LOCPROD_SEED";
pub const WORKERS_VAR: &str = "LOCPROD_WORKERS";

/// How a neighbor count is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BandwidthChoice {
    Fixed(usize),
    Rule(BandwidthRule),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BandwidthRule {
    Cv,
    RuleOfThumb,
}

impl Default for BandwidthChoice {
    fn default() -> Self {
        BandwidthChoice::Rule(BandwidthRule::RuleOfThumb)
    }
}

impl std::str::FromStr for BandwidthChoice {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "cv" => Ok(BandwidthChoice::Rule(BandwidthRule::Cv)),
            "rule-of-thumb" => Ok(BandwidthChoice::Rule(BandwidthRule::RuleOfThumb)),
            _ => s
                .parse::<usize>()
                .map(BandwidthChoice::Fixed)
                .map_err(|_| CliError::Config(format!("bandwidth `{s}` is neither a count, `cv` nor `rule-of-thumb`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub delimiter: char,
    /// Output and input columns are levels to be logged.
    pub log_transform: bool,
    pub schema: ColumnSchema,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            delimiter: ',',
            log_transform: true,
            schema: ColumnSchema::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct EstimationConfig {
    pub technology: TechnologyForm,
    pub h1: BandwidthChoice,
    pub h2: BandwidthChoice,
    /// Candidates for cross-validation; derived from the panel size when absent.
    pub cv_grid: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub replicates: usize,
    pub alpha: f64,
    pub bias_correct: bool,
    pub sidedness: Sidedness,
    pub store_draws: bool,
    /// Every coefficient at every target when absent.
    pub functionals: Option<Vec<Functional>>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            replicates: 199,
            alpha: 0.05,
            bias_correct: true,
            sidedness: Sidedness::TwoSided,
            store_draws: true,
            functionals: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecompositionConfig {
    pub pooled: bool,
    pub benchmark: BenchmarkRule,
}

impl Default for DecompositionConfig {
    fn default() -> Self {
        DecompositionConfig {
            pooled: true,
            benchmark: BenchmarkRule::MinMeanOutput,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub sizes: Vec<usize>,
    pub periods: usize,
    pub q: usize,
    pub estimators: Vec<EstimatorKind>,
    pub truth: TruthSurface,
    pub sigma_eta: f64,
    pub sigma_zeta: f64,
    pub h_scale: f64,
    pub grid: Vec<f64>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        let base = SimConfig::default();
        SimulationConfig {
            sizes: vec![100, 200, 400],
            periods: base.periods,
            q: 200,
            estimators: vec![EstimatorKind::Kernel, EstimatorKind::SampleSplitting],
            truth: base.truth,
            sigma_eta: base.sigma_eta,
            sigma_zeta: base.sigma_zeta,
            h_scale: base.h_scale,
            grid: default_grid(),
        }
    }
}

impl SimulationConfig {
    pub fn sim_config(&self, n: usize, seed: u64) -> SimConfig {
        SimConfig {
            n_firms: n,
            periods: self.periods,
            seed,
            truth: self.truth,
            sigma_eta: self.sigma_eta,
            sigma_zeta: self.sigma_zeta,
            grid: self.grid.clone(),
            h_scale: self.h_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoverageSection {
    pub sizes: Vec<usize>,
    pub q: usize,
    pub replicates: usize,
    pub alpha: f64,
    pub bias_correct: bool,
    pub points: Vec<f64>,
    pub power_offsets: Vec<f64>,
}

impl Default for CoverageSection {
    fn default() -> Self {
        let base = CoverageConfig::default();
        CoverageSection {
            sizes: vec![200],
            q: base.q,
            replicates: base.b,
            alpha: base.alpha,
            bias_correct: base.bias_correct,
            points: base.points,
            power_offsets: base.power_offsets,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: Option<usize>,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub estimation: EstimationConfig,
    pub inference: InferenceConfig,
    pub decomposition: DecompositionConfig,
    /// Data-generating process shared by `simulate` and `coverage`.
    pub simulation: SimulationConfig,
    pub coverage: CoverageSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            workers: None,
            output_dir: PathBuf::from("locprod-out"),
            data: DataConfig::default(),
            estimation: EstimationConfig::default(),
            inference: InferenceConfig::default(),
            decomposition: DecompositionConfig::default(),
            simulation: SimulationConfig::default(),
            coverage: CoverageSection::default(),
        }
    }
}

impl RunConfig {
    /// Read a TOML config, or the `config` object of a previous run's
    /// JSON manifest. Relative data paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: RunConfig = if path.extension().is_some_and(|e| e == "json") {
            let mut v: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let inner = v
                .get_mut("config")
                .map(serde_json::Value::take)
                .ok_or_else(|| CliError::Config(format!("{} has no `config` object", path.display())))?;
            serde_json::from_value(inner).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        };
        if let (Some(p), Some(dir)) = (&cfg.data.path, path.parent()) {
            if p.is_relative() {
                cfg.data.path = Some(dir.join(p));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Config(m.to_string()));
        if self.inference.replicates == 0 {
            return bad("inference.replicates must be positive");
        }
        if !(self.inference.alpha > 0.0 && self.inference.alpha <= 1.0) {
            return bad("inference.alpha must lie in (0, 1]");
        }
        if self.workers == Some(0) {
            return bad("workers must be positive");
        }
        for h in [self.estimation.h1, self.estimation.h2] {
            if h == BandwidthChoice::Fixed(0) {
                return bad("bandwidths must be positive");
            }
        }
        if !self.data.delimiter.is_ascii() {
            return bad("data.delimiter must be a single ASCII character");
        }
        if self.simulation.q == 0 || self.simulation.sizes.is_empty() || self.simulation.estimators.is_empty() {
            return bad("simulation needs positive q, at least one size and one estimator");
        }
        if self.coverage.q == 0 || self.coverage.replicates == 0 || self.coverage.sizes.is_empty() {
            return bad("coverage needs positive q, replicates and at least one size");
        }
        if !(self.coverage.alpha > 0.0 && self.coverage.alpha <= 1.0) {
            return bad("coverage.alpha must lie in (0, 1]");
        }
        Ok(())
    }
}
