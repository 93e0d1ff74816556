//! Constrained multi-period mean-variance portfolio selection under dynamic
//! factor models.
//!
//! The crate fits the future-investment-opportunity (FIO) processes
//! `d_t^-, d_t^+` and allocation vectors `k_t^-, k_t^+` by backward
//! stochastic dynamic programming under cone constraints, assembles the
//! pre-committed optimal policies, and evaluates them: efficient frontiers,
//! the variance-optimal signed supermartingale measure, time consistency in
//! efficiency, and Monte Carlo backtests with costs.

pub mod approximator;
pub mod backtest;
pub mod cones;
pub mod error;
pub mod fio;
mod linalg;
pub mod market;
pub mod policy;
mod qp;
pub mod seed;
pub mod vssm;

pub use error::{MmvError, Result};
