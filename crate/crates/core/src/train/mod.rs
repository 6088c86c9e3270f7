//! Optimizer, schedule, data loading and the fine-tuning loop.

pub mod data;
mod optim;
mod run;
mod schedule;

pub use data::{load_dataset, DataSource, Dataset, SplitTag};
pub use optim::AdamW;
pub use run::{
    accuracy, pretrain_backbone, run_finetune, ActivationAudit, EpochRecord, FinetuneOutcome, PretrainConfig, Summary,
    TrainConfig,
};
pub use schedule::cosine_schedule;
