//! Synthetic data, AdamW with a warmup-cosine schedule, and the training
//! loop with its ablation switches.

pub mod dataset;
pub mod optim;
pub mod trainer;

pub use dataset::{make_dataset, parse_caption, Sample, Scene};
pub use optim::{adamw_update, lr_at, AdamW, AdamWConfig};
pub use trainer::{fit_decoder, train, train_run, MetricsLog, RunConfig, StepMetrics, TrainingConfig};
