//! Optimization and training for the localization network: AdamW with
//! decoupled decay, reduce-on-plateau scheduling, a deterministic training
//! loop, and byte-stable checkpoints.

mod adamw;
mod checkpoint;
mod error;
mod plateau;
mod train;

pub use adamw::{adamw_step, collect_grads, OptimizerState};
pub use checkpoint::{load_model_params, push_model_params, Checkpoint, StoredTensor, CODE_U64, MAGIC, VERSION};
pub use error::{Result, TrainError};
pub use plateau::PlateauSchedule;
pub use train::{
    decode_model_config, log_csv, model_from_checkpoint, split_train_val, EpochLog, TrainConfig,
    Trainer,
};
