//! Training loops for the four protocols (from scratch, pre-training,
//! fine-tuning and linear probing), evaluation, checkpoints and metrics.

pub mod checkpoint;
pub mod config;
pub mod loss;
pub mod metrics;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{TrainConfig, TrainMode};
pub use loss::{argmax_rows, cross_entropy_smoothed};
pub use metrics::{append_metrics_csv, read_metrics_csv, MetricsRecord};
pub use trainer::{
    evaluate, extract_features, fine_tune, init_model, linear_probe, match_resolution, mean_loss, prepare_batch, probe_error,
    Batch, FinetuneOutcome, ProbeOutcome, Trainer,
};
