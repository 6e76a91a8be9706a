//! Loss families, gradients, Lipschitz constants and global aggregates.
//!
//! Two closed-form families are supported:
//!
//! * least squares, `f_i(x) = (1/2d_i) Σ_t (<a_t, x> - b_t)^2`
//! * L2-regularised logistic regression,
//!   `f_i(x) = (1/d_i) Σ_t (ln(1 + e^{<a_t,x>}) - b_t <a_t,x>) + (λ/2)||x||^2`

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};

/// A point in `R^n`: the global model, a local model or a dual vector.
pub type ParamVector = Array1<f64>;

/// Multiplier applied to power-iteration eigenvalue estimates so the
/// returned Lipschitz constant is an upper bound.
pub const LIPSCHITZ_SAFETY: f64 = 1.01;
const POWER_TOL: f64 = 1e-6;
const POWER_MAX_ITERS: usize = 10_000;

/// One client's local data.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    features: Array2<f64>,
    labels: Array1<f64>,
}

impl ClientShard {
    pub fn new(features: Array2<f64>, labels: Array1<f64>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(FedError::InvalidShard(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(FedError::InvalidShard("shard has no samples".into()));
        }
        if !features.iter().chain(labels.iter()).all(|v| v.is_finite()) {
            return Err(FedError::InvalidShard("non-finite entry".into()));
        }
        Ok(Self { features, labels })
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &Array1<f64> {
        &self.labels
    }

    /// Number of samples `d_i`.
    pub fn size(&self) -> usize {
        self.labels.len()
    }

    /// Feature dimension `n`.
    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    fn check_dim(&self, x: ArrayView1<f64>) -> Result<()> {
        if x.len() != self.dim() {
            return Err(FedError::DimensionMismatch {
                expected: self.dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    LinReg,
    LogReg { lambda: f64 },
}

impl ModelKind {
    pub fn logreg(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(FedError::Config(format!(
                "logistic penalty must be a finite nonnegative number, got {lambda}"
            )));
        }
        Ok(ModelKind::LogReg { lambda })
    }
}

/// Client weights `α_i`, positive and summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightScheme(Vec<f64>);

impl WeightScheme {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(FedError::Config("weight scheme needs at least one client".into()));
        }
        if alpha.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
            return Err(FedError::Config("every weight must be positive".into()));
        }
        let total: f64 = alpha.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(FedError::Config(format!("weights sum to {total}, not 1")));
        }
        Ok(Self(alpha))
    }

    /// `α_i = 1/m`.
    pub fn uniform(m: usize) -> Self {
        Self(vec![1.0 / m as f64; m])
    }

    /// `α_i = d_i / d`.
    pub fn proportional(sizes: &[usize]) -> Result<Self> {
        let d: usize = sizes.iter().sum();
        Self::new(sizes.iter().map(|&s| s as f64 / d as f64).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `ln(1 + e^u)` without overflow.
pub fn softplus(u: f64) -> f64 {
    u.max(0.0) + (-u.abs()).exp().ln_1p()
}

/// The standard logistic map.
pub fn logistic(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

fn finite(value: f64, what: &'static str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(FedError::Overflow { what })
    }
}

/// `f_i(x)`.
pub fn local_loss(shard: &ClientShard, kind: ModelKind, x: &ParamVector) -> Result<f64> {
    shard.check_dim(x.view())?;
    let d = shard.size() as f64;
    let margins = shard.features.dot(x);
    let value = match kind {
        ModelKind::LinReg => {
            let sq: f64 = margins
                .iter()
                .zip(shard.labels.iter())
                .map(|(u, b)| (u - b) * (u - b))
                .sum();
            sq / (2.0 * d)
        }
        ModelKind::LogReg { lambda } => {
            let s: f64 = margins
                .iter()
                .zip(shard.labels.iter())
                .map(|(&u, &b)| softplus(u) - b * u)
                .sum();
            s / d + 0.5 * lambda * x.dot(x)
        }
    };
    finite(value, "local loss")
}

/// `∇f_i(x)`.
pub fn local_grad(shard: &ClientShard, kind: ModelKind, x: &ParamVector) -> Result<ParamVector> {
    shard.check_dim(x.view())?;
    let d = shard.size() as f64;
    let mut margins = shard.features.dot(x);
    let grad = match kind {
        ModelKind::LinReg => {
            margins -= &shard.labels;
            shard.features.t().dot(&margins) / d
        }
        ModelKind::LogReg { lambda } => {
            margins.zip_mut_with(&shard.labels, |u, &b| *u = logistic(*u) - b);
            let mut g = shard.features.t().dot(&margins);
            g /= d;
            g.scaled_add(lambda, x);
            g
        }
    };
    if !grad.iter().all(|v| v.is_finite()) {
        return Err(FedError::Overflow { what: "local gradient" });
    }
    Ok(grad)
}

/// Largest eigenvalue of `AᵀA`, by power iteration.
pub fn gram_spectral_norm(features: &Array2<f64>) -> Result<f64> {
    let n = features.ncols();
    if n == 0 {
        return Ok(0.0);
    }
    // Deterministic start with no special alignment to coordinate axes.
    let mut v = Array1::from_shape_fn(n, |j| 1.0 + 0.5 * ((j as f64 + 1.0) * 0.618_033_988_7).fract());
    let norm = v.dot(&v).sqrt();
    v /= norm;
    let mut estimate = 0.0;
    for _ in 0..POWER_MAX_ITERS {
        let av = features.dot(&v);
        let w = features.t().dot(&av);
        let next = v.dot(&w);
        let w_norm = w.dot(&w).sqrt();
        if w_norm == 0.0 {
            return Ok(0.0);
        }
        v = w / w_norm;
        if (next - estimate).abs() <= POWER_TOL * next.abs() {
            // One more Rayleigh quotient at the converged direction.
            let av = features.dot(&v);
            return Ok(av.dot(&av).max(next));
        }
        estimate = next;
    }
    Err(FedError::PowerIteration {
        iterations: POWER_MAX_ITERS,
    })
}

/// Certified upper bound on the gradient Lipschitz constant `r_i`.
pub fn lipschitz_estimate(shard: &ClientShard, kind: ModelKind) -> Result<f64> {
    let top = gram_spectral_norm(&shard.features)? / shard.size() as f64;
    let r = match kind {
        ModelKind::LinReg => top * LIPSCHITZ_SAFETY,
        ModelKind::LogReg { lambda } => 0.25 * top * LIPSCHITZ_SAFETY + lambda,
    };
    // Constant-gradient losses are Lipschitz with any constant; keep r_i > 0.
    Ok(r.max(f64::MIN_POSITIVE))
}

/// `(f(x), ∇f(x))` with `f = Σ α_i f_i`, summed in client order.
pub fn global_loss_grad(
    shards: &[ClientShard],
    kind: ModelKind,
    weights: &WeightScheme,
    x: &ParamVector,
) -> Result<(f64, ParamVector)> {
    check_weights(shards, weights)?;
    let mut value = 0.0;
    let mut grad = Array1::zeros(x.len());
    for (shard, &alpha) in shards.iter().zip(weights.as_slice()) {
        value += alpha * local_loss(shard, kind, x)?;
        grad.scaled_add(alpha, &local_grad(shard, kind, x)?);
    }
    Ok((value, grad))
}

/// `f(x)` alone.
pub fn global_loss(
    shards: &[ClientShard],
    kind: ModelKind,
    weights: &WeightScheme,
    x: &ParamVector,
) -> Result<f64> {
    stacked_loss(shards, kind, weights, &vec![x.clone(); shards.len()])
}

/// `F(W) = Σ α_i f_i(x_i)`, same summation order as [`global_loss_grad`].
pub fn stacked_loss(
    shards: &[ClientShard],
    kind: ModelKind,
    weights: &WeightScheme,
    locals: &[ParamVector],
) -> Result<f64> {
    check_weights(shards, weights)?;
    if locals.len() != shards.len() {
        return Err(FedError::DimensionMismatch {
            expected: shards.len(),
            actual: locals.len(),
        });
    }
    let mut value = 0.0;
    for ((shard, &alpha), x) in shards.iter().zip(weights.as_slice()).zip(locals) {
        value += alpha * local_loss(shard, kind, x)?;
    }
    Ok(value)
}

fn check_weights(shards: &[ClientShard], weights: &WeightScheme) -> Result<()> {
    if shards.len() != weights.len() {
        return Err(FedError::DimensionMismatch {
            expected: shards.len(),
            actual: weights.len(),
        });
    }
    Ok(())
}
