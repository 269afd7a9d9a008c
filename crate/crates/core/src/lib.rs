//! Off-policy temporal-difference policy evaluation.
//!
//! The crate provides the tabular machinery (finite MDPs, policies,
//! trajectories, exact value oracles), every lambda-return variant used for
//! off-policy Expected Sarsa evaluation including the control-variate form,
//! the exact variance recursion with its brute-force cross-check, linear
//! function approximation (feature maps, the (A, b, M) model, MSPBE in both
//! its projected and quadratic forms, eligibility traces, tile coding), the
//! unstable naive gradient learner together with the convergent primal-dual
//! learner, closed-form diagnostics (two-state A matrix, divergence region,
//! primal-dual gap, averaging bound), four benchmark environments, and a
//! deterministic experiment harness with CSV output.

pub mod analysis;
pub mod envs;
pub mod error;
pub mod fa;
pub mod harness;
pub mod learners;
pub mod linalg;
pub mod mdp;
pub mod returns;
pub mod rng;

pub use error::{Error, Result};
pub use fa::{EligibilityTrace, FeatureMap, LinearModel, TileCodingConfig};
pub use mdp::{
    PairIndexer, PairOrdering, Policy, QTable, StartState, Step, TabularMdp, Trajectory,
};
pub use returns::{ReturnConfig, VarianceReport};
