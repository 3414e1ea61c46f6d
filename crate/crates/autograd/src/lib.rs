//! Tape-based reverse-mode automatic differentiation over `ndarray`.
//!
//! The engine is deliberately small: a [`Tape`] records operations as they
//! execute, [`Tape::backward`] replays them in reverse, and a [`ParamStore`]
//! owns named parameters across iterations. Everything is generic over the
//! element type so the same model code runs in f32 for training and f64 for
//! finite-difference gradient verification.
//!
//! Determinism contract: for a fixed seed and fixed inputs, every forward and
//! backward pass is bit-identical across runs on the same host. Internal
//! parallelism (rayon over the batch axis) never reorders floating-point
//! reductions.

mod conv;
mod element;
mod init;
mod linalg;
mod nn;
mod optim;
mod params;
mod tape;

pub mod check;

pub use element::Element;
pub use init::{randn, Init};
pub use optim::AdamW;
pub use params::{Builder, ParamId, ParamStore};
pub use linalg::matmul2;
pub use tape::{Gradients, Tape, Var};

pub use ndarray;
