//! The interface shared by FedADMM and the baselines.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::model::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlgorithmKind {
    FedAdmm,
    FedAvg,
    FedProx,
    FedAlt,
    FedSim,
}

impl AlgorithmKind {
    pub const ALL: [AlgorithmKind; 5] = [
        AlgorithmKind::FedAdmm,
        AlgorithmKind::FedAvg,
        AlgorithmKind::FedProx,
        AlgorithmKind::FedAlt,
        AlgorithmKind::FedSim,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AlgorithmKind::FedAdmm => "fedadmm",
            AlgorithmKind::FedAvg => "fedavg",
            AlgorithmKind::FedProx => "fedprox",
            AlgorithmKind::FedAlt => "fedalt",
            AlgorithmKind::FedSim => "fedsim",
        }
    }
}

impl fmt::Display for AlgorithmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AlgorithmKind {
    type Err = FedError;

    fn from_str(s: &str) -> Result<Self> {
        AlgorithmKind::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| FedError::Config(format!("unknown algorithm '{s}'")))
    }
}

/// What one iteration did.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepSummary {
    /// Inner iterations (solver steps or local gradient steps) summed over clients.
    pub inner_iters: usize,
    /// Number of client vectors summed by the server, if it averaged this step.
    pub averaged_clients: Option<usize>,
}

/// A federated optimiser driven one iteration `k` at a time.
///
/// `step(k, omega)` performs iteration `k` with participating set `omega`
/// (the set `Ω^{τ_{k+1}}`, redrawn by the caller whenever `k` is a
/// communication step).
pub trait FederatedAlgorithm {
    fn kind(&self) -> AlgorithmKind;

    fn step(&mut self, k: u64, omega: &[usize]) -> Result<StepSummary>;

    /// The server model `x^{τ_{k+1}}` after the most recent step.
    fn global_model(&self) -> &ParamVector;

    /// The Lyapunov value after the most recent step, when the algorithm has one.
    fn lyapunov(&self) -> Option<f64> {
        None
    }
}
