//! Tensor math, reverse-mode autodiff, layers, gradient checking, and
//! checkpoints. Everything is plain f64 on the CPU.

pub mod checkpoint;
pub mod gradcheck;
pub mod nn;
pub mod params;
pub mod tape;
pub mod tensor;

pub use params::{ParamId, ParamStore};
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;
