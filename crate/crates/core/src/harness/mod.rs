//! Experiment orchestration: training, cross-validation, cross-context
//! transfer, checkpoints and reports.

mod checkpoint;
mod config;
mod cv;
mod report;
mod train;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CheckpointHeader, FORMAT_VERSION, MAGIC,
};
pub use config::RunConfig;
pub use cv::{
    cross_validate, evaluate, make_folds, run_cv, run_transfer, version_string, CvRun, EvaluationReport, FoldResult,
    LateWeights, MetricMap, TransferMatrix, ECE_BINS,
};
pub use report::{
    calibration_csv, emit_report, markdown_table, report_from_csv, report_from_json, report_to_csv, report_to_json,
    transfer_markdown, ReportFormat,
};
pub use train::{batches, fit_prepared, split_by_participant, train, Adam, EpochRecord, TrainOutcome};
