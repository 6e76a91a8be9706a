//! Federated learning with inexact ADMM under partial participation.
//!
//! The crate is organised bottom-up:
//!
//! - [`model`]: client shards, local losses and gradients, Lipschitz estimates.
//! - [`data`]: synthetic generators, LIBSVM parsing, partitioning, CSV shards.
//! - [`participation`]: client selection policies and the round clock.
//! - [`fedadmm`]: the FedADMM server/client state machine.
//! - [`baselines`]: FedAvg, FedProx, FedAlt and FedSim.
//! - [`harness`]: experiment runner, stopping rules, traces and sweeps.
//! - [`config`] and [`cli`]: TOML configuration and the command-line front end.

pub mod algorithm;
pub mod baselines;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod fedadmm;
pub mod harness;
pub mod model;
pub mod participation;
pub mod rng;

pub use algorithm::{AlgorithmKind, FederatedAlgorithm, StepSummary};
pub use data::FederatedDataset;
pub use error::{FedError, Result};
pub use fedadmm::{AdmmConfig, FedAdmm};
pub use model::{ClientShard, ModelKind, ParamVector, WeightScheme};
pub use participation::{Policy, RoundClock, SelectionPlan};
