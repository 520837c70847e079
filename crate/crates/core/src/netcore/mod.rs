//! Reverse-mode differentiation kernel, the conv/recurrent network, Adam and
//! the training loop.
//!
//! Sequence activations are `[batch, time, channels]` tensors so that batch
//! norm can take statistics over batch and time together.

mod adam;
mod checkpoint;
pub mod layers;
mod model;
mod tape;
mod tensor;
mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, TrainingState};
pub use model::{
    forward_char, forward_seq2seq, BatchNormState, ForwardPass, Mode, Model, ModelConfig,
    RecurrentKind, Task,
};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub use train::{
    predict, predict_log_probs, train, EpochRecord, LossSelector, TrainConfig, TrainOutcome,
    Trainer,
};
