//! Reverse-mode autodiff and graph neural network models.

mod adam;
mod checkpoint;
mod model;
mod tape;

pub use adam::{clip_grad_norm, Adam};
pub use checkpoint::{
    checkpoint_json, load_checkpoint, parse_checkpoint, save_checkpoint, CHECKPOINT_FORMAT,
    CHECKPOINT_VERSION,
};
pub use model::{
    stack_windows, Architecture, ForwardOutput, GraphModel, GraphShiftOp, Head, ModelConfig,
    Param, SignalScaler,
};
pub use tape::{shift_blocks, Gradients, Tape, Var};
