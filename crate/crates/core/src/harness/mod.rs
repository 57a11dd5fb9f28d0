//! Configuration, ranking metrics and end-to-end orchestration.
//!
//! [`run_pipeline`] executes the stages data, clean baseline, injection,
//! compromised training, dual-view training, detection, influence,
//! rectification and the final report, writing each stage's artifacts into an
//! output directory. Stages whose outputs were produced under the same
//! configuration can be resumed instead of recomputed.

mod config;
mod metrics;
mod pipeline;
mod sweep;

pub use config::{
    DatasetSource, DualViewSpec, EvalConfig, ExperimentConfig, FileSource, SweepConfig,
    SynthSource, TargetSpec,
};
pub use metrics::{
    build_cases, case_ranks, convergence_report, evaluate_topk, metrics_from_ranks, rank_of,
    round_up, ConvergenceRow, EvalCase, RankingMetrics, Target,
};
pub use pipeline::{
    inject, load_data, run_pipeline, train_prefixes, train_target, validation_terms,
    DetectionBrief, DetectionOutput, InfluenceBrief, MetricsReport, PipelineOutcome, RectifyBrief,
    RectifyOutput, RunOptions, Stage, Workspace,
};
pub use sweep::{fake_order_effect_sweep, sweep_variants, EffectRow, EffectTable, Variant};
