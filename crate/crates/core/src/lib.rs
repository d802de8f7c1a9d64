//! Cycle-consistent adversarial denoising of low-dose CT images learned from
//! unpaired routine-dose images.

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod gradcheck_suite;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod phantom;
pub mod real;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
