//! Decoding, matching and detection metrics, plus attack evaluation.

mod metrics;
mod suite;

pub use metrics::{compute_metrics, decode_detections, match_detections, Detection, DetectionSet, MatchResult, MetricsReport};
pub use suite::{
    evaluate, run_experiment_suite, write_attack_report, write_suite_csvs, AttackReport, CheckpointMetrics, EvalConfig, PatchSpec,
    SuiteResult, SweepRow, TransferCell,
};

#[cfg(test)]
mod tests;
