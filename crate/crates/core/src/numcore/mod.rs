//! Dense-tensor numeric core: row-major `f64` tensors, a reverse-mode tape,
//! and a finite-difference gradient checker. Everything downstream builds on
//! this module; speed is explicitly not the goal, verifiability is.

pub mod gradcheck;
pub mod kernels;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, CheckParam, GradCheckReport};
pub use tape::{pixel_shuffle_data, pixel_unshuffle_data, Tape, TensorId};
pub use tensor::{ensure_finite, Tensor};
