//! Dense tensors, reverse-mode autodiff, recurrent/convolutional layers and
//! the optimizer.

pub mod codec;
pub mod layers;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use codec::Checkpoint;
pub use layers::{
    dropout, run_lstm, softmax, Activation, Bound, Conv1d, ConvBank, Highway, Linear, LstmCell, Mode, ParamId,
    ParamStore, Prenet, Zoneout,
};
pub use optim::{adam_step, clip_global_norm, exp_decay_lr, AdamState};
pub use rng::{RngStream, Substream};
pub use tape::{AttnSpec, Gradients, Tape, Var};
pub use tensor::Tensor;
