//! Learning unknown continuous state constraints from expert demonstrations.
//!
//! Demonstrations are treated as positive (feasible) data and trajectories of
//! a reward-seeking policy as unlabeled data. A labeled-vs-unlabeled
//! classifier with a shifted decision threshold then separates feasible from
//! infeasible states, and the policy is retrained against the learned
//! constraint with a fixed reward penalty.

pub mod error;
pub mod config;
pub mod constraint;
pub mod envs;
pub mod experiment;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod policy;
pub mod synthetic;

pub use error::{Error, Result};
