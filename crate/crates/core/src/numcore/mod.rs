//! Dense tensors, reverse-mode differentiation, Adam, and checkpoint I/O.

mod adam;
pub mod broadcast;
mod checkpoint;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointDescriptor, ParamEntry, CHECKPOINT_VERSION,
};
pub use params::{BoundParams, ParamStore};
pub use tape::{OpKind, Tape, TapeNode, Var};
pub use tensor::Tensor;

pub(crate) use tape::huber_value;
