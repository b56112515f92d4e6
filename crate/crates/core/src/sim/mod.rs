//! Simulation study: data generation, misspecification scenarios, truths and metrics.

pub mod dgp;
pub mod study;

pub use dgp::{schema, DgpParams, TrialGenerator};
pub use study::{
    apply_misspecification, compute_truth, default_names, run_replication, run_study, run_study_with_truth, summarize, MetricRow, MetricsTable, Replication,
    Scenario, ScenarioSpec, StudyResult, Truth, working_models,
};
