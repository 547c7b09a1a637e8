//! Heads, data, optimization and the training loop.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod heads;
pub mod metrics;
pub mod optim;
pub mod schedule;
pub mod step;
pub mod trainer;

pub use config::{DataConfig, DataKind, DiagConfig, OptimizerKind, RunConfig, TrainConfig};
pub use data::{load_cifar10, load_datasets, parse_cifar10, synthetic_task, Dataset, Split};
pub use optim::Optimizer;
pub use schedule::cosine_lr;
pub use step::{forward_backward, infer, loss_value, Inference, Mode, StepOutput, Targets};
pub use trainer::{check_geometry, evaluate, restrict_targets, EpochSummary, EvalMetrics, StepRecord, TrainReport, Trainer};
