//! Reverse-mode automatic differentiation over dynamic-rank `f64` arrays.
//!
//! Arithmetic runs in double precision while trainable state (parameters and
//! optimizer moments) is stored at single precision, so checkpoints written as
//! `f32` reload bit-exactly.

pub mod adam;
pub mod gradcheck;
pub mod params;
pub mod tape;

pub use adam::{Adam, AdamConfig};
pub use params::{round_to_f32, Binding, ParamSet, Trainable};
pub use tape::{scalar, Grads, Tape, Tensor, Var};
