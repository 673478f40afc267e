//! Deterministic simulation of compressed federated learning with
//! stochastic controlled averaging.
//!
//! Clients run corrected local SGD and send a single increment per round,
//! optionally compressed by an unbiased (SCALLION) or contractive (SCAFCOM)
//! operator. Every random draw comes from a stream keyed by
//! `(seed, round, client, purpose)`, so runs are bitwise reproducible
//! whether clients execute serially or concurrently.

pub mod algorithms;
pub mod cli;
pub mod compress;
pub mod config;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod objectives;
pub mod rng;

pub use algorithms::{AlgorithmSpec, ControlInit, HyperParams};
pub use compress::{CompressedMessage, CompressorSpec, Partition};
pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use harness::{run_experiment, RoundRecord, Simulation, Trajectory};
pub use objectives::FederatedProblem;
