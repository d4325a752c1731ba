//! Dense reverse-mode autodiff with the encoder layers built on it, plus optimizer and checkpoint support.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod tape;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use params::{Adam, AdamConfig, Gradients, ParamStore, Session};
pub use tape::{Activation, Tape, Var};
pub use tensor::Tensor;
