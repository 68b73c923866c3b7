//! Graph signal processing and graph neural networks for power grids, built
//! on a real-valued graph shift operator derived from the AC power-flow
//! equations.
//!
//! The crate is organized bottom-up:
//!
//! - [`grid`]: case files, admittance assembly and an exact power-flow solver.
//! - [`gso`]: the physics graph shift operator and its Kron reduction.
//! - [`gsp`]: graph Fourier transform and (spatio-temporal) graph filters.
//! - [`estimation`]: sensor placement and regularized phasor recovery.
//! - [`nn`]: a small reverse-mode autodiff engine and the GCN/GRN models.
//! - [`forecast`]: state estimation and forecasting datasets and training.
//! - [`voltvar`]: the volt-var control environment and PPO.

pub mod error;
pub mod grid;
pub mod gso;
pub mod gsp;
pub mod estimation;
pub mod nn;
pub mod forecast;
pub mod voltvar;

pub use error::{Error, Result};
