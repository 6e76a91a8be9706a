//! Federated learning via inexact ADMM.
//!
//! Each client `i` holds a local model `x_i`, a dual `π_i` and the packed
//! upload `z_i = σ_i x_i + π_i`. At communication steps the server forms
//! `x̄ = (1/σ) Σ_i z_i` over *all* clients (stale `z_i` for the ones that
//! did not train), and each selected client then
//!
//! 1. shrinks its tolerance, `ε_i ← ν_i ε_i`;
//! 2. runs the linearised proximal iteration
//!    `v ← (α_i r_i v + σ_i x̄ - (α_i ∇f_i(v) + π_i)) / (α_i r_i + σ_i)`
//!    from `v = x̄` until `||α_i ∇f_i(v) + π_i + σ_i (v - x̄)||² ≤ ε_i`;
//! 3. updates `π_i ← π_i + σ_i (x_i - x̄)` and repacks `z_i`.
//!
//! Unselected clients keep `(ε_i, x_i, π_i, z_i)` untouched.
//!
//! The module also exposes the quantities used to monitor a run: the
//! Lyapunov value `L̃ = 𝓛 + Σ_i 29 ε_i / ((1 - ν_i) σ_i)`, the stationarity
//! residuals, and the a-priori inner iteration bound.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::algorithm::{AlgorithmKind, FederatedAlgorithm, StepSummary};
use crate::data::FederatedDataset;
use crate::error::{FedError, Result};
use crate::model::{self, ClientShard, ModelKind, ParamVector, WeightScheme};
use crate::participation::RoundClock;

/// Coefficient of the tolerance term in the Lyapunov sequence.
pub const LYAPUNOV_EPS_WEIGHT: f64 = 29.0;

/// How the penalty parameters `σ_i` are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum SigmaRule {
    /// `σ_i = 0.2 r_i / m`, the value used in the reference experiments.
    Experiment,
    /// `σ_i = 3 α_i r_i`, the smallest value covered by the descent analysis.
    Theory,
    /// `σ_i = α_i s + ϱ α_i r_i / 2`, the inner-solver contraction condition.
    InnerContraction { varrho: f64, s: f64 },
    Explicit { values: Vec<f64> },
}

impl SigmaRule {
    pub fn resolve(&self, alpha: &[f64], r: &[f64]) -> Result<Vec<f64>> {
        let m = alpha.len();
        let sigma: Vec<f64> = match self {
            SigmaRule::Experiment => r.iter().map(|ri| 0.2 * ri / m as f64).collect(),
            SigmaRule::Theory => alpha.iter().zip(r).map(|(a, ri)| 3.0 * a * ri).collect(),
            SigmaRule::InnerContraction { varrho, s } => {
                if !(*varrho > 1.0) || *s < 0.0 {
                    return Err(FedError::Config("need varrho > 1 and s >= 0".into()));
                }
                alpha
                    .iter()
                    .zip(r)
                    .map(|(a, ri)| a * s + varrho * a * ri / 2.0)
                    .collect()
            }
            SigmaRule::Explicit { values } => {
                if values.len() != m {
                    return Err(FedError::Config(format!(
                        "expected {m} explicit sigma values, got {}",
                        values.len()
                    )));
                }
                values.clone()
            }
        };
        if let Some(bad) = sigma.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(FedError::Config(format!("sigma must be positive, got {bad}")));
        }
        Ok(sigma)
    }
}

/// Initial local state.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum InitMode {
    /// `x_i^0 = π_i^0 = 0`, as in the reference experiments.
    #[default]
    Experiment,
    /// `x_i^0 = x0` (zero by default) and `π_i^0 = -α_i ∇f_i(x_i^0)`, which
    /// makes the residual certificate hold from the very first step.
    Algorithm {
        #[serde(default)]
        x0: Option<Vec<f64>>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InnerSolverConfig {
    /// Cap on inner iterations per local solve.
    pub max_iters: usize,
    /// Contraction base used by [`kappa_bound`].
    pub varrho: f64,
    /// Hessian lower-bound parameter (`∇²f_i ⪰ -s I`).
    pub s: f64,
}

impl Default for InnerSolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 100_000,
            varrho: 2.0,
            s: 0.0,
        }
    }
}

impl InnerSolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || !(self.varrho > 1.0) || self.s < 0.0 {
            return Err(FedError::Config(
                "inner solver needs max_iters >= 1, varrho > 1, s >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Everything needed to start a FedADMM run.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmmConfig {
    pub sigma_rule: SigmaRule,
    pub eps0: f64,
    pub nu: f64,
    pub init: InitMode,
    pub inner: InnerSolverConfig,
    /// Overrides the power-iteration estimate of `r_i` when set.
    pub lipschitz: Option<Vec<f64>>,
}

impl AdmmConfig {
    /// The reference experiment setting for aggregation period `k0`:
    /// `ε_i^0 = k0²`, `ν_i = 0.95`, `σ_i = 0.2 r_i/m`, zero initialisation.
    pub fn experiment(k0: u64) -> Self {
        Self {
            sigma_rule: SigmaRule::Experiment,
            eps0: (k0 * k0) as f64,
            nu: 0.95,
            init: InitMode::Experiment,
            inner: InnerSolverConfig::default(),
            lipschitz: None,
        }
    }

    /// `σ_i = 3 α_i r_i` with gradient-consistent duals.
    pub fn theory(k0: u64) -> Self {
        Self {
            sigma_rule: SigmaRule::Theory,
            init: InitMode::Algorithm { x0: None },
            ..Self::experiment(k0)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub x: ParamVector,
    pub pi: ParamVector,
    pub z: ParamVector,
    pub eps: f64,
    pub sigma: f64,
    pub nu: f64,
    pub alpha: f64,
    pub r: f64,
    /// Round `τ` of the most recent selection.
    pub last_selected: Option<u64>,
}

impl ClientState {
    /// `||α_i ∇f_i(x_i) + π_i||²`.
    pub fn certificate(&self, shard: &ClientShard, kind: ModelKind) -> Result<f64> {
        let mut phi = model::local_grad(shard, kind, &self.x)? * self.alpha;
        phi += &self.pi;
        Ok(phi.dot(&phi))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    /// The current global model `x^{τ_k}`.
    pub x: ParamVector,
    /// `σ = Σ_i σ_i`.
    pub sigma: f64,
    pub clock: RoundClock,
    /// Number of iterations performed so far.
    pub k: u64,
}

/// Build the server and client states.
pub fn init_run(
    data: &FederatedDataset,
    weights: &WeightScheme,
    cfg: &AdmmConfig,
    clock: RoundClock,
) -> Result<(ServerState, Vec<ClientState>)> {
    let m = data.m();
    let n = data.n();
    let kind = data.kind();
    if weights.len() != m {
        return Err(FedError::DimensionMismatch {
            expected: m,
            actual: weights.len(),
        });
    }
    if !(cfg.eps0 > 0.0) {
        return Err(FedError::Config(format!("eps0 must be positive, got {}", cfg.eps0)));
    }
    if !(0.5..1.0).contains(&cfg.nu) {
        return Err(FedError::Config(format!("nu must lie in [1/2, 1), got {}", cfg.nu)));
    }
    cfg.inner.validate()?;
    let r = match &cfg.lipschitz {
        Some(r) if r.len() == m && r.iter().all(|v| *v > 0.0) => r.clone(),
        Some(_) => return Err(FedError::Config(format!("need {m} positive Lipschitz constants"))),
        None => data
            .shards()
            .iter()
            .map(|s| model::lipschitz_estimate(s, kind))
            .collect::<Result<_>>()?,
    };
    let alpha = weights.as_slice();
    let sigma = cfg.sigma_rule.resolve(alpha, &r)?;

    let x0 = match &cfg.init {
        InitMode::Algorithm { x0: Some(x0) } => {
            if x0.len() != n {
                return Err(FedError::DimensionMismatch {
                    expected: n,
                    actual: x0.len(),
                });
            }
            Array1::from(x0.clone())
        }
        _ => Array1::zeros(n),
    };

    let mut clients = Vec::with_capacity(m);
    for (i, shard) in data.shards().iter().enumerate() {
        let pi = match cfg.init {
            InitMode::Experiment => Array1::zeros(n),
            InitMode::Algorithm { .. } => model::local_grad(shard, kind, &x0)? * -alpha[i],
        };
        let mut client = ClientState {
            x: x0.clone(),
            pi,
            z: Array1::zeros(n),
            eps: cfg.eps0,
            sigma: sigma[i],
            nu: cfg.nu,
            alpha: alpha[i],
            r: r[i],
            last_selected: None,
        };
        client.z = pack_z(&client);
        clients.push(client);
    }
    let server = ServerState {
        x: x0,
        sigma: sigma.iter().sum(),
        clock,
        k: 0,
    };
    Ok((server, clients))
}

/// `(1/σ) Σ_i z_i`, summed in client order.
pub fn aggregate(clients: &[ClientState], sigma: f64) -> ParamVector {
    let n = clients.first().map_or(0, |c| c.z.len());
    let mut sum = Array1::zeros(n);
    for c in clients {
        sum += &c.z;
    }
    sum / sigma
}

/// Relative norm of `Σ_i (σ_i (x_i - x̄) + π_i)`, scaled by `1 + Σ_i ||z_i||`.
pub fn aggregation_residual(clients: &[ClientState], xbar: &ParamVector) -> f64 {
    let mut sum = Array1::zeros(xbar.len());
    let mut scale = 1.0;
    for c in clients {
        let mut term = &c.x - xbar;
        term *= c.sigma;
        term += &c.pi;
        sum += &term;
        scale += c.z.dot(&c.z).sqrt();
    }
    sum.dot(&sum).sqrt() / scale
}

/// Result of one inexact local solve.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerSolution {
    pub x: ParamVector,
    /// Number of updates of the inner recursion (at least one).
    pub iters: usize,
    /// Squared residual at the returned point.
    pub residual_sq: f64,
    /// `∇f_i` at the returned point.
    pub grad: ParamVector,
}

/// Run the linearised proximal recursion from `v = x̄` and return the first
/// iterate whose stationarity residual is within `client.eps`.
pub fn local_solve_inexact(
    client: &ClientState,
    xbar: &ParamVector,
    shard: &ClientShard,
    kind: ModelKind,
    cfg: &InnerSolverConfig,
) -> Result<InnerSolution> {
    let ar = client.alpha * client.r;
    let denom = ar + client.sigma;
    let mut v = xbar.clone();
    let mut grad = model::local_grad(shard, kind, &v)?;
    let mut best = f64::INFINITY;
    for iter in 1..=cfg.max_iters {
        let mut next = v * ar;
        next.scaled_add(client.sigma, xbar);
        next.scaled_add(-client.alpha, &grad);
        next -= &client.pi;
        next /= denom;

        grad = model::local_grad(shard, kind, &next)?;
        let mut residual = &grad * client.alpha;
        residual += &client.pi;
        residual.scaled_add(client.sigma, &next);
        residual.scaled_add(-client.sigma, xbar);
        let residual_sq = residual.dot(&residual);
        if residual_sq <= client.eps {
            return Ok(InnerSolution {
                x: next,
                iters: iter,
                residual_sq,
                grad,
            });
        }
        best = best.min(residual_sq);
        v = next;
    }
    Err(FedError::InnerSolve {
        client: usize::MAX,
        max_iters: cfg.max_iters,
        best_residual: best,
        tolerance: client.eps,
    })
}

/// `π_i + σ_i (x_new - x̄)`.
pub fn dual_update(client: &ClientState, x_new: &ParamVector, xbar: &ParamVector) -> ParamVector {
    let mut pi = x_new - xbar;
    pi *= client.sigma;
    pi += &client.pi;
    pi
}

/// `σ_i x_i + π_i`.
pub fn pack_z(client: &ClientState) -> ParamVector {
    let mut z = &client.x * client.sigma;
    z += &client.pi;
    z
}

fn lagrangian_term(client: &ClientState, loss: f64, x: &ParamVector) -> f64 {
    let gap = &client.x - x;
    client.alpha * loss + gap.dot(&client.pi) + 0.5 * client.sigma * gap.dot(&gap)
}

fn eps_penalty(client: &ClientState) -> f64 {
    LYAPUNOV_EPS_WEIGHT * client.eps / ((1.0 - client.nu) * client.sigma)
}

/// The augmented Lagrangian `𝓛(x, W, Π)`.
pub fn augmented_lagrangian(
    server: &ServerState,
    clients: &[ClientState],
    shards: &[ClientShard],
    kind: ModelKind,
) -> Result<f64> {
    let mut total = 0.0;
    for (c, shard) in clients.iter().zip(shards) {
        total += lagrangian_term(c, model::local_loss(shard, kind, &c.x)?, &server.x);
    }
    Ok(total)
}

/// `L̃ = 𝓛 + Σ_i 29 ε_i / ((1 - ν_i) σ_i)`.
pub fn lyapunov(
    server: &ServerState,
    clients: &[ClientState],
    shards: &[ClientShard],
    kind: ModelKind,
) -> Result<f64> {
    let mut total = 0.0;
    for (c, shard) in clients.iter().zip(shards) {
        total += lagrangian_term(c, model::local_loss(shard, kind, &c.x)?, &server.x);
    }
    for c in clients {
        total += eps_penalty(c);
    }
    Ok(total)
}

/// Inner iterations sufficient for the residual test:
/// `⌈log_ϱ ⌈2(α²r² + σ²) dist_sq / ε⌉ - 1⌉`, clamped at zero.
///
/// The bound counts the index `ℓ` of the last inner step, so a solve that
/// stops at `v^{ℓ+1}` performs `ℓ + 1` updates.
pub fn kappa_bound(alpha: f64, r: f64, sigma: f64, varrho: f64, dist_sq: f64, eps: f64) -> u64 {
    let ratio = (2.0 * (alpha * alpha * r * r + sigma * sigma) * dist_sq / eps).ceil();
    if ratio <= 1.0 {
        return 0;
    }
    let kappa = ratio.ln() / varrho.ln() - 1.0;
    // Absorb rounding in the logarithm quotient before taking the ceiling.
    (kappa - 1e-9).ceil().max(0.0) as u64
}

/// The three lines of the stationarity conditions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residuals {
    /// `max_i ||α_i ∇f_i(x_i) + π_i||`.
    pub grad_max: f64,
    /// `max_i ||x_i - x||`.
    pub consensus_max: f64,
    /// `||Σ_i π_i||`.
    pub dual_sum: f64,
}

impl Residuals {
    pub fn max(&self) -> f64 {
        self.grad_max.max(self.consensus_max).max(self.dual_sum)
    }
}

pub fn stationarity_residuals(
    server: &ServerState,
    clients: &[ClientState],
    shards: &[ClientShard],
    kind: ModelKind,
) -> Result<Residuals> {
    let n = server.x.len();
    let mut grad_max: f64 = 0.0;
    let mut consensus_max: f64 = 0.0;
    let mut dual = Array1::zeros(n);
    for (c, shard) in clients.iter().zip(shards) {
        grad_max = grad_max.max(c.certificate(shard, kind)?.sqrt());
        let gap = &c.x - &server.x;
        consensus_max = consensus_max.max(gap.dot(&gap).sqrt());
        dual += &c.pi;
    }
    Ok(Residuals {
        grad_max,
        consensus_max,
        dual_sum: dual.dot(&dual).sqrt(),
    })
}

/// Diagnostics from one [`FedAdmm::advance`] call.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub k: u64,
    /// `τ_{k+1}`.
    pub tau: u64,
    pub aggregated: bool,
    /// [`aggregation_residual`] evaluated against the new average, at communication steps.
    pub aggregation_residual: Option<f64>,
    pub inner_iters: usize,
    /// Selected clients whose certificate exceeded `ε_i + 1e-12`.
    pub certificate_violations: usize,
    /// Largest `||α_i ∇f_i(x_i) + π_i||² - ε_i` over the selected clients.
    pub certificate_slack: f64,
}

/// Tolerance added to `ε_i` when auditing the certificate after an update.
pub const CERTIFICATE_TOL: f64 = 1e-12;

/// A FedADMM run over one dataset.
#[derive(Debug, Clone)]
pub struct FedAdmm<'a> {
    data: &'a FederatedDataset,
    server: ServerState,
    clients: Vec<ClientState>,
    inner: InnerSolverConfig,
    /// Cached `f_i(x_i)` for the Lyapunov value.
    local_losses: Vec<f64>,
    violations: u64,
    worst_aggregation: f64,
}

impl<'a> FedAdmm<'a> {
    pub fn new(
        data: &'a FederatedDataset,
        weights: &WeightScheme,
        cfg: &AdmmConfig,
        clock: RoundClock,
    ) -> Result<Self> {
        let (server, clients) = init_run(data, weights, cfg, clock)?;
        let local_losses = clients
            .iter()
            .zip(data.shards())
            .map(|(c, s)| model::local_loss(s, data.kind(), &c.x))
            .collect::<Result<_>>()?;
        Ok(Self {
            data,
            server,
            clients,
            inner: cfg.inner,
            local_losses,
            violations: 0,
            worst_aggregation: 0.0,
        })
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn data(&self) -> &FederatedDataset {
        self.data
    }

    /// Current `L̃`, using cached local losses.
    pub fn lyapunov_value(&self) -> f64 {
        let mut total = 0.0;
        for (c, &loss) in self.clients.iter().zip(&self.local_losses) {
            total += lagrangian_term(c, loss, &self.server.x);
        }
        for c in &self.clients {
            total += eps_penalty(c);
        }
        total
    }

    /// Certificate violations accumulated over the run.
    pub fn total_violations(&self) -> u64 {
        self.violations
    }

    /// Largest [`aggregation_residual`] seen at a communication step.
    pub fn worst_aggregation_residual(&self) -> f64 {
        self.worst_aggregation
    }

    pub fn residuals(&self) -> Result<Residuals> {
        stationarity_residuals(&self.server, &self.clients, self.data.shards(), self.data.kind())
    }

    /// Perform iteration `k = server.k` with participating set `omega`.
    pub fn advance(&mut self, omega: &[usize]) -> Result<StepReport> {
        let m = self.clients.len();
        if omega.is_empty() {
            return Err(FedError::Config("participating set is empty".into()));
        }
        if let Some(&bad) = omega.iter().find(|&&i| i >= m) {
            return Err(FedError::Config(format!("client {bad} out of range for m = {m}")));
        }
        let k = self.server.k;
        let clock = self.server.clock;
        let tau = clock.tau(k + 1);
        let aggregated = clock.is_communication_step(k);
        let mut aggregation = None;
        if aggregated {
            let xbar = aggregate(&self.clients, self.server.sigma);
            aggregation = Some(aggregation_residual(&self.clients, &xbar));
            self.server.x = xbar;
        }

        let kind = self.data.kind();
        let mut inner_iters = 0;
        let mut violations = 0;
        let mut slack = f64::NEG_INFINITY;
        let mut visited = vec![false; m];
        for &i in omega {
            if std::mem::replace(&mut visited[i], true) {
                continue;
            }
            let shard = &self.data.shards()[i];
            let client = &mut self.clients[i];
            client.eps *= client.nu;
            let solution = local_solve_inexact(client, &self.server.x, shard, kind, &self.inner)
                .map_err(|e| match e {
                    FedError::InnerSolve {
                        max_iters,
                        best_residual,
                        tolerance,
                        ..
                    } => FedError::InnerSolve {
                        client: i,
                        max_iters,
                        best_residual,
                        tolerance,
                    },
                    other => other,
                })?;
            inner_iters += solution.iters;
            client.pi = dual_update(client, &solution.x, &self.server.x);
            client.x = solution.x;
            client.z = pack_z(client);
            client.last_selected = Some(tau);

            let mut phi = solution.grad * client.alpha;
            phi += &client.pi;
            let excess = phi.dot(&phi) - client.eps;
            slack = slack.max(excess);
            if excess > CERTIFICATE_TOL {
                violations += 1;
            }
            self.local_losses[i] = model::local_loss(shard, kind, &client.x)?;
        }
        self.server.k += 1;
        self.violations += violations as u64;
        if let Some(r) = aggregation {
            self.worst_aggregation = self.worst_aggregation.max(r);
        }
        Ok(StepReport {
            k,
            tau,
            aggregated,
            aggregation_residual: aggregation,
            inner_iters,
            certificate_violations: violations,
            certificate_slack: slack,
        })
    }
}

impl FederatedAlgorithm for FedAdmm<'_> {
    fn kind(&self) -> AlgorithmKind {
        AlgorithmKind::FedAdmm
    }

    fn step(&mut self, k: u64, omega: &[usize]) -> Result<StepSummary> {
        if k != self.server.k {
            return Err(FedError::Config(format!(
                "iteration {k} requested but engine is at {}",
                self.server.k
            )));
        }
        let report = self.advance(omega)?;
        Ok(StepSummary {
            inner_iters: report.inner_iters,
            averaged_clients: report.aggregated.then_some(self.clients.len()),
        })
    }

    fn global_model(&self) -> &ParamVector {
        &self.server.x
    }

    fn lyapunov(&self) -> Option<f64> {
        Some(self.lyapunov_value())
    }
}
