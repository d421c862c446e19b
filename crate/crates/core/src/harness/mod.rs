//! Synthetic data, training, evaluation and reporting.

pub mod config;
pub mod data;
pub mod eval;
pub mod oracle_suite;
pub mod report;
pub mod train;

pub use config::{parse_key_values, LrSchedule, ScheduleShape, TrainConfig};
pub use data::{generate_dataset, Dataset, Sample, SyntheticTaskSpec};
pub use eval::{decode_dataset, evaluate, evaluate_posteriors, score, DecodeMode, DecodeOptions, EvalReport, LengthBucket};
pub use oracle_suite::{run_oracle_suite, OracleCheck};
pub use report::{convergence_report, gap_from_records, reduction_ratio, ConvergenceReport, RunGap};
pub use train::{read_metrics, resume, save_checkpoint, train, Adam, MetricsRecord, TrainData, TrainOutcome, METRICS_HEADER};
