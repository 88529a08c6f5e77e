//! The assembled segmentation network, its checkpoints and cost accounting.

mod checkpoint;
mod config;
mod model;
mod stats;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::ModelConfig;
pub use model::{Stage, VmUnet};
pub use stats::{conv_cost, count_flops, count_params, linear_cost, model_cost, Cost, ModelStats, PartStats};
