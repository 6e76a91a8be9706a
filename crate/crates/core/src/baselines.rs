//! FedAvg, FedProx, FedAlt and FedSim on the same round clock as FedADMM.
//!
//! All four keep a local model `x_i` per client and a server model `x̄`.
//! At a communication step FedAvg averages `x_i` over all `m` clients while
//! the other three average over the clients that trained in the round just
//! finished (all of them at `k = 0`). FedAlt and FedSim additionally keep a
//! private block `v_i` that never leaves the client.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::algorithm::{AlgorithmKind, FederatedAlgorithm, StepSummary};
use crate::data::FederatedDataset;
use crate::error::{FedError, Result};
use crate::model::{self, ClientShard, ModelKind, ParamVector};
use crate::participation::RoundClock;

/// A local run whose loss grows past this multiple of its start is rejected.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FedAvgConfig {
    /// Step size `γ`; the local step is `γ/m`. Defaults to `m / (2 max_i r_i)`.
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FedProxConfig {
    pub mu: f64,
    pub inner_steps: usize,
    /// Defaults to `1 / (r_i + μ)`.
    pub inner_lr: Option<f64>,
}

impl Default for FedProxConfig {
    fn default() -> Self {
        Self {
            mu: 0.1,
            inner_steps: 5,
            inner_lr: None,
        }
    }
}

/// Parameters of `h_i(x, v) = (1 - a) f_i(x) + a f_i(v) + (μ/2)||x - v||²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PersonalizationConfig {
    /// Mixing weight `a ∈ [0, 1]`.
    pub alpha_mix: f64,
    pub mu: f64,
    pub inner_steps: usize,
    /// Defaults to `1 / (r_i + 2μ)`.
    pub inner_lr: Option<f64>,
}

impl Default for PersonalizationConfig {
    fn default() -> Self {
        Self {
            alpha_mix: 0.5,
            mu: 0.001,
            inner_steps: 5,
            inner_lr: None,
        }
    }
}

impl PersonalizationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha_mix) || !(self.mu >= 0.0) {
            return Err(FedError::Config(
                "personalization needs alpha_mix in [0, 1] and mu >= 0".into(),
            ));
        }
        check_lr(self.inner_lr)
    }
}

fn check_lr(lr: Option<f64>) -> Result<()> {
    match lr {
        Some(lr) if !(lr > 0.0 && lr.is_finite()) => {
            Err(FedError::Config(format!("inner_lr must be positive, got {lr}")))
        }
        _ => Ok(()),
    }
}

/// Which baseline to run, with its parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BaselineSpec {
    FedAvg(FedAvgConfig),
    FedProx(FedProxConfig),
    FedAlt(PersonalizationConfig),
    FedSim(PersonalizationConfig),
}

impl BaselineSpec {
    pub fn kind(&self) -> AlgorithmKind {
        match self {
            BaselineSpec::FedAvg(_) => AlgorithmKind::FedAvg,
            BaselineSpec::FedProx(_) => AlgorithmKind::FedProx,
            BaselineSpec::FedAlt(_) => AlgorithmKind::FedAlt,
            BaselineSpec::FedSim(_) => AlgorithmKind::FedSim,
        }
    }

    /// Default parameters for a baseline kind; `None` for FedADMM.
    pub fn default_for(kind: AlgorithmKind) -> Option<Self> {
        match kind {
            AlgorithmKind::FedAdmm => None,
            AlgorithmKind::FedAvg => Some(BaselineSpec::FedAvg(FedAvgConfig::default())),
            AlgorithmKind::FedProx => Some(BaselineSpec::FedProx(FedProxConfig::default())),
            AlgorithmKind::FedAlt => Some(BaselineSpec::FedAlt(PersonalizationConfig::default())),
            AlgorithmKind::FedSim => Some(BaselineSpec::FedSim(PersonalizationConfig::default())),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            BaselineSpec::FedAvg(cfg) => match cfg.gamma {
                Some(g) if !(g > 0.0 && g.is_finite()) => {
                    Err(FedError::Config(format!("gamma must be positive, got {g}")))
                }
                _ => Ok(()),
            },
            BaselineSpec::FedProx(cfg) => {
                if !(cfg.mu > 0.0) || cfg.inner_steps == 0 {
                    return Err(FedError::Config("fedprox needs mu > 0 and inner_steps >= 1".into()));
                }
                check_lr(cfg.inner_lr)
            }
            BaselineSpec::FedAlt(cfg) | BaselineSpec::FedSim(cfg) => cfg.validate(),
        }
    }
}

/// One FedAvg local step from `start`: `start - (γ/m) ∇f_i(start)`.
pub fn fedavg_local(shard: &ClientShard, kind: ModelKind, start: &ParamVector, step: f64) -> Result<ParamVector> {
    let grad = model::local_grad(shard, kind, start)?;
    let mut x = start.clone();
    x.scaled_add(-step, &grad);
    Ok(x)
}

/// Gradient descent on `f_i(v) + (μ/2)||v - x̄||²` from `start`.
pub fn fedprox_local(
    shard: &ClientShard,
    kind: ModelKind,
    start: &ParamVector,
    xbar: &ParamVector,
    mu: f64,
    steps: usize,
    lr: f64,
) -> Result<ParamVector> {
    let objective = |v: &ParamVector| -> Result<f64> {
        let gap = v - xbar;
        Ok(model::local_loss(shard, kind, v)? + 0.5 * mu * gap.dot(&gap))
    };
    let start_loss = objective(start)?;
    let mut v = start.clone();
    for _ in 0..steps {
        let mut grad = model::local_grad(shard, kind, &v)?;
        grad.scaled_add(mu, &v);
        grad.scaled_add(-mu, xbar);
        v.scaled_add(-lr, &grad);
    }
    if steps > 0 {
        check_divergence(start_loss, objective(&v)?)?;
    }
    Ok(v)
}

fn check_divergence(start: f64, loss: f64) -> Result<()> {
    if !loss.is_finite() || loss > DIVERGENCE_FACTOR * start.abs().max(f64::MIN_POSITIVE) {
        return Err(FedError::Diverged {
            client: usize::MAX,
            start,
            loss,
        });
    }
    Ok(())
}

/// `h_i(x, v)`.
pub fn personalized_loss(
    shard: &ClientShard,
    kind: ModelKind,
    cfg: &PersonalizationConfig,
    x: &ParamVector,
    v: &ParamVector,
) -> Result<f64> {
    let gap = x - v;
    Ok((1.0 - cfg.alpha_mix) * model::local_loss(shard, kind, x)?
        + cfg.alpha_mix * model::local_loss(shard, kind, v)?
        + 0.5 * cfg.mu * gap.dot(&gap))
}

/// `(∂h_i/∂x, ∂h_i/∂v)`.
pub fn personalized_grad(
    shard: &ClientShard,
    kind: ModelKind,
    cfg: &PersonalizationConfig,
    x: &ParamVector,
    v: &ParamVector,
) -> Result<(ParamVector, ParamVector)> {
    let gap = x - v;
    let mut gx = model::local_grad(shard, kind, x)? * (1.0 - cfg.alpha_mix);
    gx.scaled_add(cfg.mu, &gap);
    let mut gv = model::local_grad(shard, kind, v)? * cfg.alpha_mix;
    gv.scaled_add(-cfg.mu, &gap);
    Ok((gx, gv))
}

fn grad_x(shard: &ClientShard, kind: ModelKind, cfg: &PersonalizationConfig, x: &ParamVector, v: &ParamVector) -> Result<ParamVector> {
    let mut g = model::local_grad(shard, kind, x)? * (1.0 - cfg.alpha_mix);
    g.scaled_add(cfg.mu, x);
    g.scaled_add(-cfg.mu, v);
    Ok(g)
}

fn grad_v(shard: &ClientShard, kind: ModelKind, cfg: &PersonalizationConfig, x: &ParamVector, v: &ParamVector) -> Result<ParamVector> {
    let mut g = model::local_grad(shard, kind, v)? * cfg.alpha_mix;
    g.scaled_add(cfg.mu, v);
    g.scaled_add(-cfg.mu, x);
    Ok(g)
}

/// FedAlt local work: `steps` GD steps on `v` with `x` fixed, then `steps` on `x`.
pub fn fedalt_local(
    shard: &ClientShard,
    kind: ModelKind,
    cfg: &PersonalizationConfig,
    x: &mut ParamVector,
    v: &mut ParamVector,
    lr: f64,
) -> Result<()> {
    let start = personalized_loss(shard, kind, cfg, x, v)?;
    for _ in 0..cfg.inner_steps {
        let g = grad_v(shard, kind, cfg, x, v)?;
        v.scaled_add(-lr, &g);
    }
    for _ in 0..cfg.inner_steps {
        let g = grad_x(shard, kind, cfg, x, v)?;
        x.scaled_add(-lr, &g);
    }
    if cfg.inner_steps > 0 {
        check_divergence(start, personalized_loss(shard, kind, cfg, x, v)?)?;
    }
    Ok(())
}

/// FedSim local work: `steps` joint GD steps on `(x, v)`.
pub fn fedsim_local(
    shard: &ClientShard,
    kind: ModelKind,
    cfg: &PersonalizationConfig,
    x: &mut ParamVector,
    v: &mut ParamVector,
    lr: f64,
) -> Result<()> {
    let start = personalized_loss(shard, kind, cfg, x, v)?;
    for _ in 0..cfg.inner_steps {
        let (gx, gv) = personalized_grad(shard, kind, cfg, x, v)?;
        x.scaled_add(-lr, &gx);
        v.scaled_add(-lr, &gv);
    }
    if cfg.inner_steps > 0 {
        check_divergence(start, personalized_loss(shard, kind, cfg, x, v)?)?;
    }
    Ok(())
}

/// Per-client baseline state.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineClient {
    pub x: ParamVector,
    /// Personal block, used by FedAlt and FedSim only.
    pub v: ParamVector,
    pub r: f64,
}

/// A baseline run over one dataset.
#[derive(Debug, Clone)]
pub struct Baseline<'a> {
    data: &'a FederatedDataset,
    spec: BaselineSpec,
    clock: RoundClock,
    server: ParamVector,
    clients: Vec<BaselineClient>,
    /// Clients that trained in the round that is about to close.
    last_round: Vec<usize>,
    k: u64,
    gamma: f64,
    averages: u64,
    last_average_size: Option<usize>,
}

impl<'a> Baseline<'a> {
    pub fn new(data: &'a FederatedDataset, spec: BaselineSpec, clock: RoundClock) -> Result<Self> {
        spec.validate()?;
        let kind = data.kind();
        let n = data.n();
        let m = data.m();
        let clients: Vec<BaselineClient> = data
            .shards()
            .iter()
            .map(|s| {
                Ok(BaselineClient {
                    x: Array1::zeros(n),
                    v: Array1::zeros(n),
                    r: model::lipschitz_estimate(s, kind)?,
                })
            })
            .collect::<Result<_>>()?;
        let r_max = clients.iter().map(|c| c.r).fold(0.0, f64::max);
        let gamma = match spec {
            BaselineSpec::FedAvg(FedAvgConfig { gamma: Some(g) }) => g,
            _ => m as f64 / (2.0 * r_max),
        };
        Ok(Self {
            data,
            spec,
            clock,
            server: Array1::zeros(n),
            clients,
            last_round: (0..m).collect(),
            k: 0,
            gamma,
            averages: 0,
            last_average_size: None,
        })
    }

    pub fn clients(&self) -> &[BaselineClient] {
        &self.clients
    }

    pub fn spec(&self) -> &BaselineSpec {
        &self.spec
    }

    /// FedAvg step size `γ`.
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Number of averaging operations performed so far.
    pub fn averages(&self) -> u64 {
        self.averages
    }

    /// Number of clients in the most recent average.
    pub fn last_average_size(&self) -> Option<usize> {
        self.last_average_size
    }

    fn average(&mut self, members: &[usize]) {
        let mut sum = Array1::zeros(self.server.len());
        for &i in members {
            sum += &self.clients[i].x;
        }
        self.server = sum / members.len() as f64;
        self.averages += 1;
        self.last_average_size = Some(members.len());
    }

    fn local_update(&mut self, i: usize, communicated: bool) -> Result<()> {
        let shard = &self.data.shards()[i];
        let kind = self.data.kind();
        let m = self.clients.len() as f64;
        let client = &mut self.clients[i];
        let start = if communicated { self.server.clone() } else { client.x.clone() };
        match self.spec {
            BaselineSpec::FedAvg(_) => {
                client.x = fedavg_local(shard, kind, &start, self.gamma / m)?;
            }
            BaselineSpec::FedProx(cfg) => {
                let lr = cfg.inner_lr.unwrap_or(1.0 / (client.r + cfg.mu));
                client.x = fedprox_local(shard, kind, &start, &self.server, cfg.mu, cfg.inner_steps, lr)?;
            }
            BaselineSpec::FedAlt(cfg) | BaselineSpec::FedSim(cfg) => {
                let lr = cfg.inner_lr.unwrap_or(1.0 / (client.r + 2.0 * cfg.mu));
                let mut x = start;
                let mut v = client.v.clone();
                if matches!(self.spec, BaselineSpec::FedAlt(_)) {
                    fedalt_local(shard, kind, &cfg, &mut x, &mut v, lr)?;
                } else {
                    fedsim_local(shard, kind, &cfg, &mut x, &mut v, lr)?;
                }
                client.x = x;
                client.v = v;
            }
        }
        Ok(())
    }
}

impl FederatedAlgorithm for Baseline<'_> {
    fn kind(&self) -> AlgorithmKind {
        self.spec.kind()
    }

    fn step(&mut self, k: u64, omega: &[usize]) -> Result<StepSummary> {
        let m = self.clients.len();
        if k != self.k {
            return Err(FedError::Config(format!("iteration {k} requested but engine is at {}", self.k)));
        }
        if omega.is_empty() {
            return Err(FedError::Config("participating set is empty".into()));
        }
        if let Some(&bad) = omega.iter().find(|&&i| i >= m) {
            return Err(FedError::Config(format!("client {bad} out of range for m = {m}")));
        }
        let communicated = self.clock.is_communication_step(k);
        let mut averaged = None;
        if communicated {
            let members: Vec<usize> = match self.spec {
                BaselineSpec::FedAvg(_) => (0..m).collect(),
                _ => std::mem::take(&mut self.last_round),
            };
            self.average(&members);
            averaged = Some(members.len());
            self.last_round = omega.to_vec();
            self.last_round.sort_unstable();
            self.last_round.dedup();
        }
        let mut done = vec![false; m];
        for &i in omega {
            if std::mem::replace(&mut done[i], true) {
                continue;
            }
            self.local_update(i, communicated).map_err(|e| match e {
                FedError::Diverged { start, loss, .. } => FedError::Diverged { client: i, start, loss },
                other => other,
            })?;
        }
        self.k += 1;
        Ok(StepSummary {
            inner_iters: 0,
            averaged_clients: averaged,
        })
    }

    fn global_model(&self) -> &ParamVector {
        &self.server
    }
}
