//! Locationally varying production functions: kernel-weighted two-step
//! proxy estimation, wild bootstrap inference, a location-invariance test,
//! productivity decomposition and a simulation harness.

pub mod decomposition;
pub mod error;
pub mod estimator;
pub mod inference;
pub mod kernel;
pub mod panel;
pub mod rng;
pub mod simulator;
pub mod solver;
pub mod stats;

pub use decomposition::{decomposition_table, BenchmarkRule, DecompositionRecord, DecompositionTable};
pub use error::{Error, Result};
pub use estimator::{
    cross_validate, estimate_invariant, full_fit, full_fit_at, Bandwidths, CvResult, CvStep, EstimationResult,
    EstimationSummary, TechnologyForm, TechnologySpec,
};
pub use inference::{
    invariance_test, percentile_ci, wild_bootstrap, BootstrapDraws, ConfidenceInterval, Functional,
    InvarianceTestResult, Sidedness,
};
pub use kernel::{kernel_weights, Bandwidth, KernelFamily, KernelSpec, WeightVector};
pub use panel::{load_panel, ColumnSchema, Location, PanelDataset, PanelObservation, RawRecord};
pub use simulator::{
    coverage_study, generate_panel, run_monte_carlo, sample_splitting_estimator, CoverageConfig, CoverageReport,
    EstimatorKind, MonteCarloReport, SimConfig, TruthSurface,
};
