//! Gradient estimation through multivariate categorical distributions.
//!
//! The crate provides exact enumeration oracles, the score-function family
//! (REINFORCE, RLOO), the CatLog estimators (SCateR, IndeCateR), local
//! expectation gradients (LEG), the Gumbel-Softmax relaxation, a small
//! reverse-mode autodiff engine, and desk-scale experiment pipelines.

pub mod categorical;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod nn;
pub mod report;
pub mod rng;
pub mod tasks;

pub use categorical::{
    enumerate_support, exact_expectation, exact_gradient, softmax_row, Factorisation, FnObjective,
    GradTable, LogitTable, Objective, RelaxedObjective, SampleBatch, TableObjective, DEFAULT_BUDGET,
};
pub use error::{Error, Result};
pub use estimators::{EstimatorConfig, EstimatorKind, GradEstimate};
pub use harness::{run_experiment, selftest, ExperimentConfig, ExperimentId};
pub use report::{Format, RunReport, StepRecord};
