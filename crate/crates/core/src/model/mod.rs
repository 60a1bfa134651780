//! The attentive multi-task network, its baselines, and checkpoints.

mod checkpoint;
mod config;
mod network;
mod nontransfer;
mod params;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{HiddenActivation, ModelConfig, Variant};
pub use network::{
    backward, forward, joint_loss, loss, loss_and_gradient, per_task_mse, predict, predict_records, Batch,
    BatchOutput, ForwardCache, Mode, Prediction,
};
pub use nontransfer::{build_nontransfer_features, noise_surrogates, raw_blocks_from_tiled, RawBlocks, RAW_BLOCK_DIM};
pub use params::{init_limit, init_params, ModelParams, ParamLayout, Slot, Structure};
