//! Loss, optimizer, patch sampling, checkpoints and the training loop.

mod checkpoint;
mod loss;
mod optim;
mod sampler;
mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION};
pub use loss::{
    compose_loss, decay_term, total_loss, weighted_bce, BceValue, DecayMode, LabelBatch, LossParts, LossWeights,
};
pub use optim::{lr_at, sgd_step, OptimState};
pub use sampler::{sample_patch_batch, sample_position, PatchBatch, TrainImage};
pub use trainer::{train, train_step, StepReport, TrainConfig, TrainState};
