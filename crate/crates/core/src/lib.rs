//! Certified ε-δ individual fairness for fully-connected neural networks.
//!
//! The pipeline is
//! `model` → `bounds` (interval propagation) → `pwl` (piecewise-linear
//! activation bounds) → `encode` (MILP over-approximation) → `solve`
//! (anytime branch-and-bound over a bounded primal simplex).
//! `metric` provides the similarity metrics and their linear relaxations,
//! `train` implements fairness-regularized training with per-sample MILP
//! adversaries, and `dataset`/`evaluate` cover tabular ingestion and
//! group/individual fairness reporting.

pub mod bounds;
pub mod dataset;
pub mod encode;
pub mod evaluate;
pub mod linalg;
pub mod metric;
pub mod model;
pub mod pwl;
pub mod solve;
pub mod train;

mod error;

pub use error::{Error, Result};
