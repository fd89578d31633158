//! Corpus ingestion, the training loop, evaluation, metrics output and
//! checkpoints.

mod checkpoint;
mod config;
mod data;
mod metrics;
mod overrides;
mod train;

pub use checkpoint::{Checkpoint, Dtype, Entry, Manifest, RunState, BLOB, MANIFEST};
pub use config::{AblationMode, Method, TrainConfig};
pub use data::{eval_windows, load_corpus, next_batch, split_corpus, tokenize, Corpus, Sequence};
pub use metrics::{
    read_metrics, read_run, write_run_outputs, Divergence, EvalPoint, PhaseTotals, RunReport, StepMetrics,
    METRICS_CSV, METRICS_JSONL, SUMMARY_JSON,
};
pub use overrides::{apply_override, apply_overrides, config_from_value, set_path, SEED_ENV};
pub use train::{evaluate, evaluate_windows, load_config, train, train_on, Trainer};
