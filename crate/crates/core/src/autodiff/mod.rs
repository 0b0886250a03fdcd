//! Minimal tensor autodiff: a recording tape, parameter storage, Adam and
//! finite-difference checking.

mod adam;
mod checkpoint;
pub mod gradcheck;
pub mod kernels;
mod params;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, CHECKPOINT_HEADER};
pub use gradcheck::{grad_check, grad_check_store, max_relative_error, numeric_gradient};
pub use params::{ParamId, ParamKind, ParamStore, Parameter};
pub use tape::{Activation, BatchStats, Gradients, Mode, Tape, Var, BN_EPS};
