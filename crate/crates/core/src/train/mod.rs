//! Optimization, evaluation, checkpoints, and metrics.

mod checkpoint;
mod metrics;
mod schedule;
mod trainer;

pub use checkpoint::{
    config_hash, load_checkpoint, save_checkpoint, Checkpoint, RngState, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use metrics::{write_json, write_metrics};
pub use schedule::{clip_grad_norm, cosine_lr, sgd_step};
pub use trainer::{
    evaluate, prepare_samples, train, DataSplits, EvalReport, MetricsRecord, PreparedSample,
    TrainConfig, TrainState, TrainSummary, Trainer,
};
