//! Learning the steady-state Kalman gain of a known linear system from output
//! data, by stochastic gradient descent on the output-prediction error.
//!
//! The learner only ever sees `(A, H)` and simulated or recorded outputs. The
//! noise covariances live in [`SystemModel`] and are used by the simulator and
//! by the oracle paths ([`filtering::steady_state_gain`], [`objective`]).

pub mod diagnostics;
pub mod error;
pub mod filtering;
pub mod learner;
pub mod linalg;
pub mod objective;
pub mod par;
pub mod seed;
pub mod system;

/// Library version, recorded in run metadata.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub use error::{Error, Result};
pub use filtering::{fixed_gain_predict, kf_step, steady_state_gain, FilterState, GainMatrix};
pub use learner::{
    batch_grad, gd_run, initial_gain, sample_requirements, sgd_run, stability_margin, stochastic_grad,
    InitStrategy, RunRecord, Safeguard, SgdConfig,
};
pub use linalg::{Matrix, Vector};
pub use objective::{cost_j, grad_j, truncated_cost_j_t, truncated_grad_j_t, CostReport};
pub use system::{make_batch, simulate, Dynamics, NoiseConfig, NoiseFamily, SystemModel, Trajectory};
