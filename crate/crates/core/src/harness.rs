//! Experiment driver: stopping rules, communication accounting, traces and
//! median sweeps.
//!
//! A run iterates `k = 0, 1, …`; at every communication step the next
//! participating set is drawn from the [`SelectionPlan`] and kept until the
//! following one. After each step a [`TraceRecord`] describes the server
//! model `x^{τ_{k+1}}`. FedADMM stops on the gradient rule; baselines stop
//! once their objective is within a relative gap of the FedADMM value on
//! the same instance.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algorithm::{AlgorithmKind, FederatedAlgorithm};
use crate::baselines::{Baseline, BaselineSpec, FedAvgConfig, FedProxConfig, PersonalizationConfig};
use crate::data::FederatedDataset;
use crate::error::{FedError, Result};
use crate::fedadmm::{AdmmConfig, FedAdmm, Residuals};
use crate::model::{self, ParamVector, WeightScheme};
use crate::participation::{Policy, RoundClock, SelectionPlan};
use crate::rng;

/// Relative objective gap accepted by the baseline stopping rule.
pub const GAP_TOL: f64 = 1e-4;

pub const DEFAULT_MAX_ITERS: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StoppingConfig {
    pub eps_tol: f64,
    /// `||∇f(0)||²`.
    pub grad0_norm_sq: f64,
    pub max_iters: u64,
}

impl StoppingConfig {
    /// `min{||∇f(0)||²/5, 5 ε n / (m d)}`.
    pub fn threshold(&self, n: usize, m: usize, d: usize) -> f64 {
        let scale = 5.0 * self.eps_tol * n as f64 / (m as f64 * d as f64);
        (self.grad0_norm_sq / 5.0).min(scale)
    }
}

/// Default tolerance: `1e-3` for least squares, `1e-7` for logistic regression.
pub fn default_eps_tol(kind: model::ModelKind) -> f64 {
    match kind {
        model::ModelKind::LinReg => 1e-3,
        model::ModelKind::LogReg { .. } => 1e-7,
    }
}

pub fn stopping_met(grad_norm_sq: f64, cfg: &StoppingConfig, n: usize, m: usize, d: usize) -> bool {
    grad_norm_sq < cfg.threshold(n, m, d)
}

/// `f_w - f_ref <= 2 (1 + |f_ref|) 1e-4`.
pub fn baseline_stopping_met(f_w: f64, f_ref: f64) -> bool {
    f_w - f_ref <= 2.0 * (1.0 + f_ref.abs()) * GAP_TOL
}

/// Communication rounds spent after `k` iterations: `⌈2k/k0⌉`.
pub fn cr_count(k: u64, k0: u64) -> u64 {
    (2 * k).div_ceil(k0)
}

/// Lower median; `NaN` for an empty slice.
pub fn lower_median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted[(sorted.len() - 1) / 2]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub k: u64,
    /// `τ_{k+1}`, the round the server model belongs to.
    pub tau: u64,
    pub cr_cumulative: u64,
    pub f_global: f64,
    pub grad_norm_sq: f64,
    pub lyapunov: Option<f64>,
    pub inner_iters_total: u64,
    pub wall_ms: f64,
    pub algorithm: AlgorithmKind,
}

pub const TRACE_HEADER: [&str; 9] = [
    "k",
    "tau",
    "cr_cumulative",
    "f_global",
    "grad_norm_sq",
    "lyapunov",
    "inner_iters_total",
    "wall_ms",
    "algorithm",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(TRACE_HEADER)?;
        for r in &self.records {
            out.write_record([
                r.k.to_string(),
                r.tau.to_string(),
                r.cr_cumulative.to_string(),
                r.f_global.to_string(),
                r.grad_norm_sq.to_string(),
                r.lyapunov.map(|v| v.to_string()).unwrap_or_default(),
                r.inner_iters_total.to_string(),
                r.wall_ms.to_string(),
                r.algorithm.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    StoppedByGradient,
    StoppedByGap,
    IterationCap,
    Failed,
}

impl RunStatus {
    pub fn converged(self) -> bool {
        matches!(self, RunStatus::StoppedByGradient | RunStatus::StoppedByGap)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::StoppedByGradient => "stopped_by_gradient",
            RunStatus::StoppedByGap => "stopped_by_gap",
            RunStatus::IterationCap => "iteration_cap",
            RunStatus::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualSummary {
    pub grad_max: f64,
    pub consensus_max: f64,
    pub dual_sum: f64,
}

impl From<Residuals> for ResidualSummary {
    fn from(r: Residuals) -> Self {
        Self {
            grad_max: r.grad_max,
            consensus_max: r.consensus_max,
            dual_sum: r.dual_sum,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub algorithm: AlgorithmKind,
    pub status: RunStatus,
    /// Iterations performed.
    pub iterations: u64,
    pub cr: u64,
    pub f_final: Option<f64>,
    pub grad_norm_sq_final: Option<f64>,
    pub grad0_norm_sq: f64,
    /// Gradient threshold for FedADMM runs.
    pub threshold: Option<f64>,
    /// FedADMM objective the baseline was compared against.
    pub f_ref: Option<f64>,
    pub inner_iters_total: u64,
    pub wall_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residuals: Option<ResidualSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certificate_violations: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregation_residual_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// The final server model.
    pub x_final: Vec<f64>,
}

/// Parameters of the baselines.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BaselineParams {
    pub fedavg: FedAvgConfig,
    pub fedprox: FedProxConfig,
    pub personalization: PersonalizationConfig,
}

impl BaselineParams {
    pub fn spec(&self, kind: AlgorithmKind) -> Option<BaselineSpec> {
        match kind {
            AlgorithmKind::FedAdmm => None,
            AlgorithmKind::FedAvg => Some(BaselineSpec::FedAvg(self.fedavg)),
            AlgorithmKind::FedProx => Some(BaselineSpec::FedProx(self.fedprox)),
            AlgorithmKind::FedAlt => Some(BaselineSpec::FedAlt(self.personalization)),
            AlgorithmKind::FedSim => Some(BaselineSpec::FedSim(self.personalization)),
        }
    }
}

/// Everything a run needs besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub k0: u64,
    pub policy: Policy,
    /// Seed of the participation streams.
    pub seed: u64,
    pub eps_tol: f64,
    pub max_iters: u64,
    pub admm: AdmmConfig,
    pub baselines: BaselineParams,
    /// Write elapsed time into the trace (zero otherwise).
    pub record_wall_time: bool,
    /// Keep the realised participating sets.
    pub keep_omegas: bool,
}

impl RunOptions {
    /// Reference experiment settings for period `k0` with uniform sampling.
    pub fn experiment(k0: u64, rho: f64, seed: u64, kind: model::ModelKind) -> Self {
        Self {
            k0,
            policy: Policy::UniformRho { rho },
            seed,
            eps_tol: default_eps_tol(kind),
            max_iters: DEFAULT_MAX_ITERS,
            admm: AdmmConfig::experiment(k0),
            baselines: BaselineParams::default(),
            record_wall_time: true,
            keep_omegas: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub trace: Trace,
    pub summary: RunSummary,
    /// `(τ, Ω^τ)` pairs when [`RunOptions::keep_omegas`] is set.
    pub omegas: Vec<(u64, Vec<usize>)>,
}

enum StopRule {
    Gradient(f64),
    Gap(f64),
}

struct DriveResult {
    trace: Trace,
    status: RunStatus,
    iterations: u64,
    inner_total: u64,
    last: Option<(f64, f64)>,
    error: Option<String>,
    wall_ms: f64,
    omegas: Vec<(u64, Vec<usize>)>,
}

fn drive<A: FederatedAlgorithm>(
    alg: &mut A,
    data: &FederatedDataset,
    weights: &WeightScheme,
    opts: &RunOptions,
    rule: StopRule,
) -> Result<DriveResult> {
    let clock = RoundClock::new(opts.k0)?;
    let plan = SelectionPlan::new(opts.policy.clone(), data.m(), opts.seed)?;
    let start = Instant::now();
    let mut trace = Trace::default();
    let mut omega: Vec<usize> = Vec::new();
    let mut omegas = Vec::new();
    let mut inner_total = 0u64;
    let mut last: Option<(f64, f64)> = None;
    let mut status = RunStatus::IterationCap;
    let mut error = None;
    let mut iterations = 0;
    for k in 0..opts.max_iters {
        if clock.is_communication_step(k) {
            let tau = clock.tau(k + 1);
            omega = plan.next_omega(tau);
            if opts.keep_omegas {
                omegas.push((tau, omega.clone()));
            }
        }
        let summary = match alg.step(k, &omega) {
            Ok(s) => s,
            Err(e) => {
                status = RunStatus::Failed;
                error = Some(e.to_string());
                break;
            }
        };
        iterations = k + 1;
        inner_total += summary.inner_iters as u64;
        if summary.averaged_clients.is_some() || last.is_none() {
            let evaluated = model::global_loss_grad(data.shards(), data.kind(), weights, alg.global_model())
                .and_then(|(f, g)| {
                    let g2 = g.dot(&g);
                    if f.is_finite() && g2.is_finite() {
                        Ok((f, g2))
                    } else {
                        Err(FedError::Diverged {
                            client: usize::MAX,
                            start: f64::NAN,
                            loss: f,
                        })
                    }
                });
            match evaluated {
                Ok(v) => last = Some(v),
                Err(e) => {
                    status = RunStatus::Failed;
                    error = Some(e.to_string());
                    break;
                }
            }
        }
        let (f, g2) = last.expect("evaluated above");
        trace.records.push(TraceRecord {
            k,
            tau: clock.tau(k + 1),
            cr_cumulative: cr_count(k, opts.k0),
            f_global: f,
            grad_norm_sq: g2,
            lyapunov: alg.lyapunov(),
            inner_iters_total: inner_total,
            wall_ms: if opts.record_wall_time {
                start.elapsed().as_secs_f64() * 1e3
            } else {
                0.0
            },
            algorithm: alg.kind(),
        });
        let stop = match rule {
            StopRule::Gradient(threshold) => g2 < threshold,
            StopRule::Gap(f_ref) => baseline_stopping_met(f, f_ref),
        };
        if stop {
            status = match rule {
                StopRule::Gradient(_) => RunStatus::StoppedByGradient,
                StopRule::Gap(_) => RunStatus::StoppedByGap,
            };
            break;
        }
    }
    Ok(DriveResult {
        trace,
        status,
        iterations,
        inner_total,
        last,
        error,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        omegas,
    })
}

fn grad0_norm_sq(data: &FederatedDataset, weights: &WeightScheme) -> Result<f64> {
    let zero = ParamVector::zeros(data.n());
    let (_, g) = model::global_loss_grad(data.shards(), data.kind(), weights, &zero)?;
    Ok(g.dot(&g))
}

fn validate_options(opts: &RunOptions) -> Result<()> {
    if !(opts.eps_tol > 0.0) {
        return Err(FedError::Config(format!("eps_tol must be positive, got {}", opts.eps_tol)));
    }
    RoundClock::new(opts.k0)?;
    Ok(())
}

/// Run FedADMM until the gradient rule fires or the iteration cap.
pub fn run_fedadmm(data: &FederatedDataset, opts: &RunOptions) -> Result<RunOutput> {
    validate_options(opts)?;
    let weights = WeightScheme::uniform(data.m());
    let grad0 = grad0_norm_sq(data, &weights)?;
    let stopping = StoppingConfig {
        eps_tol: opts.eps_tol,
        grad0_norm_sq: grad0,
        max_iters: opts.max_iters,
    };
    let threshold = stopping.threshold(data.n(), data.m(), data.d());
    let mut engine = FedAdmm::new(data, &weights, &opts.admm, RoundClock::new(opts.k0)?)?;
    let run = drive(&mut engine, data, &weights, opts, StopRule::Gradient(threshold))?;
    let residuals = engine.residuals().ok().map(ResidualSummary::from);
    Ok(RunOutput {
        summary: RunSummary {
            algorithm: AlgorithmKind::FedAdmm,
            status: run.status,
            iterations: run.iterations,
            cr: run.trace.last().map_or(0, |r| r.cr_cumulative),
            f_final: run.last.map(|v| v.0),
            grad_norm_sq_final: run.last.map(|v| v.1),
            grad0_norm_sq: grad0,
            threshold: Some(threshold),
            f_ref: None,
            inner_iters_total: run.inner_total,
            wall_ms: run.wall_ms,
            residuals,
            certificate_violations: Some(engine.total_violations()),
            aggregation_residual_max: Some(engine.worst_aggregation_residual()),
            error: run.error,
            x_final: engine.server().x.to_vec(),
        },
        trace: run.trace,
        omegas: run.omegas,
    })
}

/// Run a baseline until it is within the objective gap of `f_ref`.
pub fn run_baseline(data: &FederatedDataset, kind: AlgorithmKind, opts: &RunOptions, f_ref: f64) -> Result<RunOutput> {
    validate_options(opts)?;
    let spec = opts
        .baselines
        .spec(kind)
        .ok_or_else(|| FedError::Config(format!("{kind} is not a baseline")))?;
    let weights = WeightScheme::uniform(data.m());
    let grad0 = grad0_norm_sq(data, &weights)?;
    let mut engine = Baseline::new(data, spec, RoundClock::new(opts.k0)?)?;
    let run = drive(&mut engine, data, &weights, opts, StopRule::Gap(f_ref))?;
    Ok(RunOutput {
        summary: RunSummary {
            algorithm: kind,
            status: run.status,
            iterations: run.iterations,
            cr: run.trace.last().map_or(0, |r| r.cr_cumulative),
            f_final: run.last.map(|v| v.0),
            grad_norm_sq_final: run.last.map(|v| v.1),
            grad0_norm_sq: grad0,
            threshold: None,
            f_ref: Some(f_ref),
            inner_iters_total: run.inner_total,
            wall_ms: run.wall_ms,
            residuals: None,
            certificate_violations: None,
            aggregation_residual_max: None,
            error: run.error,
            x_final: engine.global_model().to_vec(),
        },
        trace: run.trace,
        omegas: run.omegas,
    })
}

/// A run together with the FedADMM reference it was measured against.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub run: RunOutput,
    pub reference: Option<RunOutput>,
}

/// Run `kind` on `data`. Baselines first run FedADMM on the same instance
/// to obtain the reference objective.
pub fn run_experiment(data: &FederatedDataset, kind: AlgorithmKind, opts: &RunOptions) -> Result<Experiment> {
    let admm = run_fedadmm(data, opts)?;
    if kind == AlgorithmKind::FedAdmm {
        return Ok(Experiment {
            run: admm,
            reference: None,
        });
    }
    let run = match admm.summary.f_final {
        Some(f_ref) if admm.summary.status.converged() => run_baseline(data, kind, opts, f_ref)?,
        _ => {
            return Err(FedError::Config(format!(
                "reference FedADMM run ended with status {}",
                admm.summary.status.as_str()
            )))
        }
    };
    Ok(Experiment {
        run,
        reference: Some(admm),
    })
}

/// Grid and instance count of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub grid_n: Vec<usize>,
    pub grid_m: Vec<usize>,
    pub grid_rho: Vec<f64>,
    pub grid_k0: Vec<u64>,
    pub instances: usize,
    pub base_seed: u64,
    pub algorithms: Vec<AlgorithmKind>,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid_n.is_empty()
            || self.grid_m.is_empty()
            || self.grid_rho.is_empty()
            || self.grid_k0.is_empty()
            || self.algorithms.is_empty()
        {
            return Err(FedError::Config("sweep grid must be nonempty in every axis".into()));
        }
        if self.instances == 0 {
            return Err(FedError::Config("sweep needs at least one instance".into()));
        }
        Ok(())
    }

    /// Seed of instance `i` for problem size `(n, m)`; independent of `ρ` and `k0`.
    pub fn instance_seed(&self, n: usize, m: usize, instance: usize) -> u64 {
        rng::mix(&[self.base_seed, n as u64, m as u64, instance as u64])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub n: usize,
    pub m: usize,
    pub rho: f64,
    pub k0: u64,
    pub algorithm: AlgorithmKind,
    pub median_cr: Option<f64>,
    pub median_wall_ms: Option<f64>,
    /// Instances that met their stopping rule.
    pub instances_ok: usize,
    /// Some instance failed or hit the iteration cap.
    #[serde(default)]
    pub partial: bool,
}

pub const SWEEP_HEADER: [&str; 8] = [
    "n",
    "m",
    "rho",
    "k0",
    "algorithm",
    "median_cr",
    "median_wall_ms",
    "instances_ok",
];

pub fn write_sweep_csv<W: Write>(cells: &[SweepCell], writer: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(SWEEP_HEADER)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for c in cells {
        out.write_record([
            c.n.to_string(),
            c.m.to_string(),
            c.rho.to_string(),
            c.k0.to_string(),
            c.algorithm.to_string(),
            opt(c.median_cr),
            opt(c.median_wall_ms),
            c.instances_ok.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Outcome of one instance of one cell.
#[derive(Debug, Clone, Copy, PartialEq)]
struct InstanceResult {
    cr: f64,
    wall_ms: f64,
    /// Finished without error (converged or capped).
    finished: bool,
    converged: bool,
}

const MISSING: InstanceResult = InstanceResult {
    cr: f64::NAN,
    wall_ms: f64::NAN,
    finished: false,
    converged: false,
};

/// Run every `(n, m, ρ, k0)` cell for `spec.instances` instances and
/// report per-algorithm medians.
///
/// Medians cover every instance that finished without error. A run that
/// hit the iteration cap contributes the CR and time it had spent by then,
/// which understates its true cost; `instances_ok` counts the runs that met
/// their stopping rule.
///
/// `make_data(n, m, seed)` builds one instance; `make_opts(ρ, k0, seed)`
/// builds its run options. Instances run on up to `workers` threads; the
/// result does not depend on scheduling.
pub fn median_sweep<D, O>(spec: &SweepSpec, workers: usize, make_data: D, make_opts: O) -> Result<Vec<SweepCell>>
where
    D: Fn(usize, usize, u64) -> Result<FederatedDataset> + Sync,
    O: Fn(f64, u64, u64) -> RunOptions + Sync,
{
    spec.validate()?;
    let mut jobs = Vec::new();
    for &n in &spec.grid_n {
        for &m in &spec.grid_m {
            for instance in 0..spec.instances {
                jobs.push((n, m, instance));
            }
        }
    }
    let run_job = |&(n, m, instance): &(usize, usize, usize)| -> Vec<InstanceResult> {
        let seed = spec.instance_seed(n, m, instance);
        let cells = spec.grid_rho.len() * spec.grid_k0.len() * spec.algorithms.len();
        let data = match make_data(n, m, seed) {
            Ok(d) => d,
            Err(_) => return vec![MISSING; cells],
        };
        let mut out = Vec::with_capacity(cells);
        for &rho in &spec.grid_rho {
            for &k0 in &spec.grid_k0 {
                let opts = make_opts(rho, k0, seed);
                let admm = run_fedadmm(&data, &opts).ok();
                for &alg in &spec.algorithms {
                    let run = match (&admm, alg) {
                        (Some(a), AlgorithmKind::FedAdmm) => Some(a.summary.clone()),
                        (Some(a), _) if a.summary.status.converged() => a
                            .summary
                            .f_final
                            .and_then(|f_ref| run_baseline(&data, alg, &opts, f_ref).ok())
                            .map(|r| r.summary),
                        _ => None,
                    };
                    out.push(match run {
                        Some(s) if s.status != RunStatus::Failed => InstanceResult {
                            cr: s.cr as f64,
                            wall_ms: s.wall_ms,
                            finished: true,
                            converged: s.status.converged(),
                        },
                        _ => MISSING,
                    });
                }
            }
        }
        out
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| FedError::Config(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Vec<InstanceResult>> = pool.install(|| jobs.par_iter().map(run_job).collect());

    let mut cells = Vec::new();
    let mut base = 0;
    for &n in &spec.grid_n {
        for &m in &spec.grid_m {
            let block = &results[base..base + spec.instances];
            base += spec.instances;
            let mut idx = 0;
            for &rho in &spec.grid_rho {
                for &k0 in &spec.grid_k0 {
                    for &algorithm in &spec.algorithms {
                        let finished: Vec<InstanceResult> =
                            block.iter().map(|r| r[idx]).filter(|r| r.finished).collect();
                        idx += 1;
                        let converged = finished.iter().filter(|r| r.converged).count();
                        let crs: Vec<f64> = finished.iter().map(|r| r.cr).collect();
                        let walls: Vec<f64> = finished.iter().map(|r| r.wall_ms).collect();
                        let nonempty = |v: f64| (!v.is_nan()).then_some(v);
                        cells.push(SweepCell {
                            n,
                            m,
                            rho,
                            k0,
                            algorithm,
                            median_cr: nonempty(lower_median(&crs)),
                            median_wall_ms: nonempty(lower_median(&walls)),
                            instances_ok: converged,
                            partial: converged < spec.instances,
                        });
                    }
                }
            }
        }
    }
    Ok(cells)
}
