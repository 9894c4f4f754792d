//! Minimal dense tensor library: reverse-mode autodiff on a linear tape, an
//! Adam optimizer with linear warmup, finite-difference gradient checking and
//! the `PLNS` checkpoint format.

pub mod checkpoint;
mod element;
mod error;
pub mod gradcheck;
pub mod op_suite;
pub mod optim;
pub mod rng;
mod tape;
mod tensor;

pub use element::Element;
pub use error::{NnError, Result};
pub use gradcheck::{grad_check, GradCheckReport, ScalarFn};
pub use optim::{clip_grad_norm, AdamConfig, AdamState};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
