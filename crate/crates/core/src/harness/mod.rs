//! Training, evaluation, experiment runners, gradient checks and output.

mod config;
pub mod experiments;
pub mod gradcheck;
pub mod metrics;
pub mod output;
pub mod train;

pub use config::TrainConfig;
pub use experiments::{
    run_ablations, run_robustness, run_variants, summarize_robustness, train_and_evaluate,
    unimodal_probe, AblationRow, FusionVariant, ProbeReport, RobustnessRow, RobustnessSummary,
    Variant,
};
pub use gradcheck::{run_gradcheck, CheckedTerm, GradCheckSetup, GradCheckSummary, TermCheck};
pub use metrics::{evaluate, evaluate_batch, predict, Confusion, MetricsReport, Predictions};
pub use output::{load_checkpoint, save_checkpoint};
pub use train::{train, Adam, TrainOutcome};
