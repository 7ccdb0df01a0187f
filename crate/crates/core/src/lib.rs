//! Cost-aware evaluation of prompting techniques.
//!
//! The crate scores techniques with the economical prompting index
//! `EPI = A * exp(-c * T)`, where `A` is accuracy, `T` the mean tokens per
//! query and `c` a per-token cost weight. Around that it provides the
//! built-in techniques and their templates, answer extraction and grading,
//! dataset loading and seeded sampling, completion backends with a
//! transcript cache, significance tests, an evaluation runner and report
//! emission.
//!
//! The metric and statistics code is generic over [`Scalar`] (`f32` or
//! `f64`); the aliases below fix the common choice.

pub mod analysis;
pub mod backend;
pub mod dataset;
pub mod epi;
pub mod grading;
pub mod report;
pub mod runner;
pub mod scalar;
pub mod stats;
pub mod technique;

pub use analysis::{
    aggregate_model_agnostic, aggregate_model_specific, analyze, analyze_cells, analyze_records,
    project_costs, AnalysisError, AnalysisReport, CostProjection, CostScenario, View,
};
pub use backend::{Backend, BackendError, BackendRequest, BackendResponse, UsageSource};
pub use dataset::{DatasetError, DatasetKind, Question, Quota};
pub use epi::{
    crossover_c, epi_exponential, epi_linear, epi_quadratic, ols_slope, rank_by_epi,
    relative_delta, ConcernLabel, CostConcern, Crossover, EpiCurve, EpiError, EpiModel,
};
pub use grading::{Answer, CellKey, CellSummary, EvalRecord, GradeError};
pub use report::{emit, ReportFormat};
pub use runner::{run, RunError, RunOutcome, RunPlan};
pub use scalar::Scalar;
pub use stats::{paired_t, two_proportion_z, StatsError, TestResult};
pub use technique::{TechniqueError, TechniqueSpec};

pub type TechniqueSummary = epi::TechniqueSummary<f64>;
pub type TechniqueSummaryF32 = epi::TechniqueSummary<f32>;
pub type Concern = epi::CostConcern<f64>;
pub type ConcernF32 = epi::CostConcern<f32>;
pub type Report = analysis::AnalysisReport<f64>;
pub type Scenario = analysis::CostScenario<f64>;

/// Any error the crate produces.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Epi(#[from] EpiError),
    #[error(transparent)]
    Technique(#[from] TechniqueError),
    #[error(transparent)]
    Grade(#[from] GradeError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
