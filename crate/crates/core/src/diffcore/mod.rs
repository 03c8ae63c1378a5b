//! Deterministic differentiable building blocks: row-major matrices, dense
//! layers, a gated recurrent cell, activations, RMSProp and a
//! finite-difference gradient checker.
//!
//! Every layer exposes a forward pass that returns the intermediates it needs
//! and a backward pass that accumulates into a [`GradientTape`]. All math is
//! 64-bit.

mod gradcheck;
mod gru;
mod layers;
mod matrix;
mod optim;
mod params;

pub use gradcheck::{finite_diff_check, relative_error, ArrayReport, Coverage, GradCheckConfig, GradCheckReport};
pub use gru::{GruCache, GruCell};
pub use layers::{logistic, softplus, Activation, Dense, DenseAct, DenseActCache, LEAKY_SLOPE};
pub use matrix::Matrix;
pub use optim::{RmsProp, RmsPropConfig, StepReport};
pub use params::{GradientTape, ParamId, ParameterSet, Tensor};
