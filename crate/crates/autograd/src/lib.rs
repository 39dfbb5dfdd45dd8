//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! Values are `f64` throughout. Stochastic operations take an explicit
//! random generator; nothing in this crate touches global randomness.

mod checkpoint;
pub mod gradcheck;
mod error;
mod optim;
mod special;
mod tape;
mod tensor;

pub use checkpoint::{Checkpoint, MAGIC as CHECKPOINT_MAGIC, VERSION as CHECKPOINT_VERSION};
pub use error::{Result, TensorError};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use special::{digamma, trigamma};
pub use tape::{BatchStats, Tape, Var};
pub use tensor::Tensor;
