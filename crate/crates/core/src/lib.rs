//! Hierarchical (client-edge-cloud) federated learning simulator.
//!
//! Clients train synchronously under an edge node; edge nodes push their
//! models to the cloud asynchronously, where each upload is mixed into the
//! global model with a staleness-decayed weight. On top of that protocol the
//! crate provides:
//!
//! - [`learner`]: synthetic data, non-IID partitioning and two small learners.
//! - [`aggregation`]: client-edge rounds and staleness-weighted cloud mixing.
//! - [`cost`]: computation/communication cost and latency accounting.
//! - [`mdp`]: the slotted staleness-control environment and baseline policies.
//! - [`ddqn`]: a from-scratch Double DQN staleness controller.
//! - [`association`]: heterogeneity-aware client-edge association.
//! - [`bounds`]: convergence-bound calculators and empirical checks.
//! - [`sim`]: the slotted simulation engine, baselines, logs and summaries.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregation;
pub mod association;
pub mod bounds;
pub mod cost;
pub mod ddqn;
mod error;
pub mod learner;
pub mod mdp;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
