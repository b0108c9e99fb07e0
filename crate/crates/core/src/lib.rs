//! Sequence modeling for sporadic multivariate time series.
//!
//! The model family couples a recurrent cell (plain, LSTM, or GRU) with a
//! continuous-time autoregressive correction that rescales each state
//! transition by how far the actual time gap deviates from the nominal step.
//! All gradients are hand-derived and verified against finite differences;
//! nothing here depends on an autodiff framework.
//!
//! Modules mirror the pipeline: [`numerics`] holds the dense kernel,
//! [`dataset`] ingests and bins sporadic observations, [`car`] implements the
//! autoregressive correction and the univariate imputer, [`cells`] the
//! forward passes, [`bptt`] the exact backward passes and the gradient-check
//! oracle, and [`train`] the optimizer and training loop.

pub mod bptt;
pub mod car;
pub mod cells;
pub mod dataset;
mod error;
pub mod numerics;
pub mod train;

pub use cells::{CellKind, Model};
pub use error::{Error, Result};
pub use numerics::{Activation, Matrix, Vector};
