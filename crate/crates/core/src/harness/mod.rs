//! Configuration, persistence, training, and the experiment drivers.

pub mod checkpoint;
pub mod compare;
pub mod config;
pub mod data;
pub mod eval;
pub mod metrics;
pub mod train;

pub use checkpoint::{Checkpoint, CheckpointMeta, FORMAT_VERSION};
pub use compare::{compare_init, validate_pair, CompareSummary};
pub use config::{config_diff, resolve_seed, DataConfig, OptimConfig, RunConfig, TrainMode};
pub use data::{gen_data, GenSpec, Layout};
pub use eval::{
    evaluate, evaluate_records, sample_template, sweep_quality_speed, write_sweep_csv, EvalReport,
    Responder, SweepRow,
};
pub use metrics::{read_metrics, MetricsRow, MetricsWriter};
pub use train::{initial_model, train, HeldOut, TrainOutcome};
