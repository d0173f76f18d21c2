//! `bwdtk`: estimate offline-RL dataset quality without training a full
//! agent.
//!
//! The toolkit fits a small behavioral SARSA critic to a dataset, then
//! scores the dataset with the Bellman-Wasserstein distance — an entropic
//! optimal-transport distance between the dataset's state-action pairs and
//! the same states paired with random actions, under a value-aware cost.
//! Larger values mean the behavior policy concentrates on higher-value
//! actions than chance, i.e. a higher-quality dataset.
//!
//! Modules:
//! - [`dataset`]: transitions, binary/JSONL serialization, random policies
//! - [`envgen`]: synthetic benchmark environments and graded data generation
//! - [`approx`]: a minimal dense network with exact gradients and Adam
//! - [`critic`]: the behavioral SARSA critic and fitted value head
//! - [`metrics`]: baseline quality metrics (mean reward, Q, advantage, PD)
//! - [`bwd`]: the Bellman-Wasserstein dual estimator and Sinkhorn oracle
//! - [`iql`]: desk-scale IQL with the optional BWD actor regularizer
//! - [`report`]: correlation suite tying metrics to oracle quality
//! - [`cli`]: the `bwdtk` command-line interface

pub mod approx;
pub mod bwd;
pub mod cli;
pub mod critic;
pub mod dataset;
pub mod envgen;
pub mod error;
pub mod iql;
pub mod linalg;
pub mod metrics;
pub mod report;
pub mod rng;

pub use error::{Error, Result};
