//! Synthetic data, augmentation, optimizer, schedule and training loops.

pub mod augment;
pub mod config;
pub mod data;
pub mod optim;
pub mod schedule;
pub mod train;

pub use augment::{augment, AugmentConfig, AugmentDraw};
pub use config::{DataConfig, RunConfig, TrainConfig};
pub use data::{gen_synthetic, load_dataset, save_dataset, Dataset, Sample};
pub use optim::{AdamW, AdamWConfig};
pub use schedule::cosine_lr;
pub use train::{evaluate, thread_count, train, train_model, EpochRecord, Evaluation, Split, TrainOptions, TrainOutcome};
