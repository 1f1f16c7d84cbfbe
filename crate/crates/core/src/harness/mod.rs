//! Experiment harness: method dispatch, evaluation against the gold reward,
//! the token × chunk grid, forward-pass accounting and report files.

mod complexity;
mod method;
mod pipeline;
mod report;
mod run;
mod stages;

pub use complexity::{closed_form_counts, expected_counts, verify_complexity, ComplexityCheck};
pub use method::{MethodId, ValueKind};
pub use pipeline::{
    fit_dpo, fit_fudge, fit_reward, fit_sft, pair_responses, train_models, PipelineConfig, TrainedModels,
};
pub use report::{emit_report, read_report_csv, sig6, CsvRow, ReportFormat, CSV_COLUMNS};
pub use run::{
    generate, run_best_beta, run_grid, run_method, speed_profile, EvalSet, ExperimentReport, Grid, ModelSet, BETA_GRID,
};
pub use stages::{decode_eval, write_generations, ArtifactDir, GenerationRecord};
