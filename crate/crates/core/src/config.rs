//! Flat TOML run configuration.
//!
//! Every key is optional except `schema_version`; unknown keys are rejected.
//! Values are resolved in the order command-line override, environment
//! (`FEDADMM_OUTPUT_DIR` for the output directory), file, built-in default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::algorithm::AlgorithmKind;
use crate::baselines::{FedAvgConfig, FedProxConfig, PersonalizationConfig};
use crate::data::{self, FederatedDataset, GenSpec, LabelMode};
use crate::error::{FedError, Result};
use crate::fedadmm::{AdmmConfig, InitMode, InnerSolverConfig, SigmaRule};
use crate::harness::{self, BaselineParams, RunOptions, SweepSpec, DEFAULT_MAX_ITERS};
use crate::model::ModelKind;
use crate::participation::{DelayModel, Policy};

pub const SCHEMA_VERSION: u32 = 1;
pub const OUTPUT_DIR_ENV: &str = "FEDADMM_OUTPUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    #[default]
    Synthetic,
    Libsvm,
    /// A directory written by `generate`.
    Shards,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelName {
    #[default]
    Linreg,
    Logreg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyName {
    #[default]
    Uniform,
    Cover,
    Straggler,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaName {
    #[default]
    Experiment,
    Theory,
    InnerContraction,
    Explicit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitName {
    #[default]
    Experiment,
    Algorithm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub algorithm: AlgorithmKind,

    pub dataset: DatasetSource,
    pub m: usize,
    pub n: usize,
    pub d_min: usize,
    pub d_max: usize,
    pub label_mode: LabelMode,
    pub libsvm_path: Option<PathBuf>,
    /// Feature dimension override for LIBSVM input.
    pub libsvm_n: Option<usize>,
    pub shards_dir: Option<PathBuf>,
    pub model: ModelName,
    pub lambda: f64,

    pub k0: u64,
    pub policy: PolicyName,
    pub rho: f64,
    pub s0: Option<usize>,
    pub m0: Option<usize>,
    pub delay_mean_min: f64,
    pub delay_mean_max: f64,
    pub delay_means: Option<Vec<f64>>,

    pub sigma_rule: SigmaName,
    pub sigma_values: Option<Vec<f64>>,
    pub varrho: f64,
    pub s: f64,
    pub init_mode: InitName,
    pub x0: Option<Vec<f64>>,
    /// Defaults to `k0²`.
    pub eps0: Option<f64>,
    pub nu: f64,
    pub inner_max_iters: usize,

    /// Defaults to 1e-3 (linreg) or 1e-7 (logreg).
    pub eps_tol: Option<f64>,
    pub max_iters: u64,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub record_wall_time: bool,
    pub dump_omegas: bool,
    /// Defaults to the number of available cores.
    pub workers: Option<usize>,

    pub fedavg_gamma: Option<f64>,
    pub fedprox_mu: f64,
    pub fedprox_inner_steps: usize,
    pub fedprox_inner_lr: Option<f64>,
    pub pers_alpha: f64,
    pub pers_mu: f64,
    pub pers_inner_steps: usize,
    pub pers_inner_lr: Option<f64>,

    pub grid_n: Option<Vec<usize>>,
    pub grid_m: Option<Vec<usize>>,
    pub grid_rho: Option<Vec<f64>>,
    pub grid_k0: Option<Vec<u64>>,
    pub instances: usize,
    pub algorithms: Option<Vec<AlgorithmKind>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let prox = FedProxConfig::default();
        let pers = PersonalizationConfig::default();
        Self {
            schema_version: SCHEMA_VERSION,
            algorithm: AlgorithmKind::FedAdmm,
            dataset: DatasetSource::Synthetic,
            m: 20,
            n: 20,
            d_min: 50,
            d_max: 150,
            label_mode: LabelMode::Joint,
            libsvm_path: None,
            libsvm_n: None,
            shards_dir: None,
            model: ModelName::Linreg,
            lambda: 0.001,
            k0: 10,
            policy: PolicyName::Uniform,
            rho: 0.5,
            s0: None,
            m0: None,
            delay_mean_min: 1.0,
            delay_mean_max: 5.0,
            delay_means: None,
            sigma_rule: SigmaName::Experiment,
            sigma_values: None,
            varrho: 2.0,
            s: 0.0,
            init_mode: InitName::Experiment,
            x0: None,
            eps0: None,
            nu: 0.95,
            inner_max_iters: InnerSolverConfig::default().max_iters,
            eps_tol: None,
            max_iters: DEFAULT_MAX_ITERS,
            seed: 1,
            output_dir: PathBuf::from("out"),
            record_wall_time: true,
            dump_omegas: false,
            workers: None,
            fedavg_gamma: None,
            fedprox_mu: prox.mu,
            fedprox_inner_steps: prox.inner_steps,
            fedprox_inner_lr: prox.inner_lr,
            pers_alpha: pers.alpha_mix,
            pers_mu: pers.mu,
            pers_inner_steps: pers.inner_steps,
            pers_inner_lr: pers.inner_lr,
            grid_n: None,
            grid_m: None,
            grid_rho: None,
            grid_k0: None,
            instances: 20,
            algorithms: None,
        }
    }
}

/// Split `key=value`, parsing the value as a TOML value and falling back to
/// a bare string.
fn parse_override(text: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| FedError::Config(format!("override '{text}' is not key=value")))?;
    let key = key.trim().to_string();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key, value))
}

impl RunConfig {
    /// Parse TOML text, apply `key=value` overrides, then validate.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| FedError::Config(e.message().to_string()))?;
        for item in overrides {
            let (key, value) = parse_override(item)?;
            table.insert(key, value);
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| FedError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read a file, apply overrides and the output-directory environment variable.
    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let mut cfg = Self::from_toml_str(&text, &[])?;
        if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
            if !dir.is_empty() {
                cfg.output_dir = PathBuf::from(dir);
            }
        }
        if !overrides.is_empty() {
            let mut table = toml::Table::try_from(&cfg).map_err(|e| FedError::Config(e.to_string()))?;
            for item in overrides {
                let (key, value) = parse_override(item)?;
                table.insert(key, value);
            }
            cfg = table
                .try_into()
                .map_err(|e: toml::de::Error| FedError::Config(e.message().to_string()))?;
            cfg.validate()?;
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| FedError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(FedError::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.k0 == 0 {
            return Err(FedError::Config("k0 must be at least 1".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(FedError::Config("lambda must be nonnegative".into()));
        }
        match self.dataset {
            DatasetSource::Synthetic => {
                if self.model != ModelName::Linreg {
                    return Err(FedError::Config("synthetic data supports model = \"linreg\" only".into()));
                }
                self.gen_spec(self.m, self.n, self.seed).validate()?;
            }
            DatasetSource::Libsvm if self.libsvm_path.is_none() => {
                return Err(FedError::Config("dataset = \"libsvm\" needs libsvm_path".into()));
            }
            DatasetSource::Shards if self.shards_dir.is_none() => {
                return Err(FedError::Config("dataset = \"shards\" needs shards_dir".into()));
            }
            _ => {}
        }
        if let Some(eps) = self.eps_tol {
            if !(eps > 0.0) {
                return Err(FedError::Config("eps_tol must be positive".into()));
            }
        }
        if self.instances == 0 {
            return Err(FedError::Config("instances must be at least 1".into()));
        }
        self.policy()?;
        self.admm_config(self.k0)?.inner.validate()?;
        for kind in AlgorithmKind::ALL {
            if let Some(spec) = self.baseline_params().spec(kind) {
                spec.validate()?;
            }
        }
        Ok(())
    }

    pub fn model_kind(&self) -> Result<ModelKind> {
        match self.model {
            ModelName::Linreg => Ok(ModelKind::LinReg),
            ModelName::Logreg => ModelKind::logreg(self.lambda),
        }
    }

    pub fn gen_spec(&self, m: usize, n: usize, seed: u64) -> GenSpec {
        GenSpec {
            m,
            n,
            d_min: self.d_min,
            d_max: self.d_max,
            seed,
            label_mode: self.label_mode,
        }
    }

    /// Build the dataset for client count `m`, dimension `n` and `seed`.
    pub fn build_dataset(&self, m: usize, n: usize, seed: u64) -> Result<FederatedDataset> {
        match self.dataset {
            DatasetSource::Synthetic => data::generate_linreg(&self.gen_spec(m, n, seed)),
            DatasetSource::Libsvm => {
                let path = self.libsvm_path.as_ref().expect("validated");
                let raw = data::load_libsvm(path, self.libsvm_n)?;
                data::partition(&raw.to_dense(), &ndarray::Array1::from(raw.labels.clone()), m, seed, self.model_kind()?)
            }
            DatasetSource::Shards => {
                let (dataset, _) = data::import_dataset(self.shards_dir.as_ref().expect("validated"))?;
                if dataset.kind() != self.model_kind()? {
                    return Err(FedError::Config("shards were exported for a different model".into()));
                }
                Ok(dataset)
            }
        }
    }

    pub fn dataset(&self) -> Result<FederatedDataset> {
        self.build_dataset(self.m, self.n, self.seed)
    }

    pub fn policy_for(&self, rho: f64) -> Result<Policy> {
        Ok(match self.policy {
            PolicyName::Uniform => Policy::UniformRho { rho },
            PolicyName::Cover => Policy::CoverSchedule {
                s0: self.s0.ok_or_else(|| FedError::Config("policy = \"cover\" needs s0".into()))?,
            },
            PolicyName::Straggler => Policy::Straggler {
                m0: self.m0.ok_or_else(|| FedError::Config("policy = \"straggler\" needs m0".into()))?,
                delays: match &self.delay_means {
                    Some(means) => DelayModel::ExponentialMeans { means: means.clone() },
                    None => DelayModel::Exponential {
                        mean_min: self.delay_mean_min,
                        mean_max: self.delay_mean_max,
                    },
                },
            },
        })
    }

    pub fn policy(&self) -> Result<Policy> {
        self.policy_for(self.rho)
    }

    pub fn admm_config(&self, k0: u64) -> Result<AdmmConfig> {
        let sigma_rule = match self.sigma_rule {
            SigmaName::Experiment => SigmaRule::Experiment,
            SigmaName::Theory => SigmaRule::Theory,
            SigmaName::InnerContraction => SigmaRule::InnerContraction {
                varrho: self.varrho,
                s: self.s,
            },
            SigmaName::Explicit => SigmaRule::Explicit {
                values: self
                    .sigma_values
                    .clone()
                    .ok_or_else(|| FedError::Config("sigma_rule = \"explicit\" needs sigma_values".into()))?,
            },
        };
        Ok(AdmmConfig {
            sigma_rule,
            eps0: self.eps0.unwrap_or((k0 * k0) as f64),
            nu: self.nu,
            init: match self.init_mode {
                InitName::Experiment => InitMode::Experiment,
                InitName::Algorithm => InitMode::Algorithm { x0: self.x0.clone() },
            },
            inner: InnerSolverConfig {
                max_iters: self.inner_max_iters,
                varrho: self.varrho,
                s: self.s,
            },
            lipschitz: None,
        })
    }

    pub fn baseline_params(&self) -> BaselineParams {
        BaselineParams {
            fedavg: FedAvgConfig {
                gamma: self.fedavg_gamma,
            },
            fedprox: FedProxConfig {
                mu: self.fedprox_mu,
                inner_steps: self.fedprox_inner_steps,
                inner_lr: self.fedprox_inner_lr,
            },
            personalization: PersonalizationConfig {
                alpha_mix: self.pers_alpha,
                mu: self.pers_mu,
                inner_steps: self.pers_inner_steps,
                inner_lr: self.pers_inner_lr,
            },
        }
    }

    /// Run options for period `k0`, participation rate `rho` and `seed`.
    pub fn run_options_for(&self, rho: f64, k0: u64, seed: u64) -> Result<RunOptions> {
        let kind = self.model_kind()?;
        Ok(RunOptions {
            k0,
            policy: self.policy_for(rho)?,
            seed,
            eps_tol: self.eps_tol.unwrap_or_else(|| harness::default_eps_tol(kind)),
            max_iters: self.max_iters,
            admm: self.admm_config(k0)?,
            baselines: self.baseline_params(),
            record_wall_time: self.record_wall_time,
            keep_omegas: self.dump_omegas,
        })
    }

    pub fn run_options(&self) -> Result<RunOptions> {
        self.run_options_for(self.rho, self.k0, self.seed)
    }

    pub fn sweep_spec(&self) -> SweepSpec {
        SweepSpec {
            grid_n: self.grid_n.clone().unwrap_or_else(|| vec![self.n]),
            grid_m: self.grid_m.clone().unwrap_or_else(|| vec![self.m]),
            grid_rho: self.grid_rho.clone().unwrap_or_else(|| vec![self.rho]),
            grid_k0: self.grid_k0.clone().unwrap_or_else(|| vec![self.k0]),
            instances: self.instances,
            base_seed: self.seed,
            algorithms: self.algorithms.clone().unwrap_or_else(|| vec![self.algorithm]),
        }
    }

    pub fn workers(&self) -> usize {
        self.workers
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
    }
}
