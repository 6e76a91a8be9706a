//! Participating-client selection, the aggregation clock and cover checks.
//!
//! Rounds are indexed by `τ ≥ 1`; each round's draw comes from its own
//! random stream keyed by `(seed, τ)`, so rounds can be generated in any
//! order. Client indices are zero-based and returned sorted.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::rng::{self, Stream};

/// Delay model for straggler simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum DelayModel {
    /// Exponential delays whose per-client means are drawn once, uniformly
    /// from `[mean_min, mean_max]`.
    Exponential { mean_min: f64, mean_max: f64 },
    /// Exponential delays with the given per-client means.
    ExponentialMeans { means: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum Policy {
    /// `⌊ρm⌋` clients (at least one), uniformly without replacement.
    UniformRho { rho: f64 },
    /// Rotate through `s0` contiguous groups so every aligned window of `s0`
    /// rounds covers all clients.
    CoverSchedule { s0: usize },
    /// The `m0` clients with the smallest sampled delay respond first.
    Straggler { m0: usize, delays: DelayModel },
}

/// A participation policy bound to a client count and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionPlan {
    policy: Policy,
    m: usize,
    seed: u64,
    straggler_means: Vec<f64>,
}

impl SelectionPlan {
    pub fn new(policy: Policy, m: usize, seed: u64) -> Result<Self> {
        if m == 0 {
            return Err(FedError::Config("selection plan needs at least one client".into()));
        }
        let mut straggler_means = Vec::new();
        match &policy {
            Policy::UniformRho { rho } => {
                if !(*rho > 0.0 && *rho <= 1.0) {
                    return Err(FedError::Config(format!("rho must lie in (0, 1], got {rho}")));
                }
            }
            Policy::CoverSchedule { s0 } => {
                if *s0 == 0 || *s0 > m {
                    return Err(FedError::Config(format!("s0 must lie in [1, m={m}], got {s0}")));
                }
            }
            Policy::Straggler { m0, delays } => {
                if *m0 == 0 || *m0 >= m {
                    return Err(FedError::Config(format!("m0 must lie in [1, m={m}), got {m0}")));
                }
                straggler_means = match delays {
                    DelayModel::Exponential { mean_min, mean_max } => {
                        if !(*mean_min > 0.0 && mean_min <= mean_max && mean_max.is_finite()) {
                            return Err(FedError::Config("delay means need 0 < min <= max".into()));
                        }
                        let mut r = rng::stream(seed, Stream::StragglerMeans, 0);
                        (0..m)
                            .map(|_| {
                                if mean_min == mean_max {
                                    *mean_min
                                } else {
                                    r.gen_range(*mean_min..=*mean_max)
                                }
                            })
                            .collect()
                    }
                    DelayModel::ExponentialMeans { means } => {
                        if means.len() != m || means.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                            return Err(FedError::Config(format!("need {m} positive delay means")));
                        }
                        means.clone()
                    }
                };
            }
        }
        Ok(Self {
            policy,
            m,
            seed,
            straggler_means,
        })
    }

    /// Everyone, every round.
    pub fn full(m: usize) -> Self {
        Self::new(Policy::UniformRho { rho: 1.0 }, m, 0).expect("rho = 1 is valid")
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of clients drawn per round by [`Policy::UniformRho`].
    pub fn uniform_size(&self, rho: f64) -> usize {
        ((rho * self.m as f64).floor() as usize).clamp(1, self.m)
    }

    /// `Ω^τ` for round `τ ≥ 1`.
    pub fn next_omega(&self, tau: u64) -> Vec<usize> {
        match &self.policy {
            Policy::UniformRho { rho } => {
                let size = self.uniform_size(*rho);
                if size == self.m {
                    return (0..self.m).collect();
                }
                let mut r = rng::stream(self.seed, Stream::Participation, tau);
                let mut picked = index::sample(&mut r, self.m, size).into_vec();
                picked.sort_unstable();
                picked
            }
            Policy::CoverSchedule { s0 } => {
                let group = (tau.saturating_sub(1) % *s0 as u64) as usize;
                let (start, end) = group_bounds(self.m, *s0, group);
                (start..end).collect()
            }
            Policy::Straggler { .. } => self.sample_straggler(tau),
        }
    }

    /// Per-client delays for round `τ` under the straggler policy.
    pub fn straggler_delays(&self, tau: u64) -> Vec<f64> {
        let mut r = rng::stream(self.seed, Stream::StragglerDelays, tau);
        self.straggler_means
            .iter()
            .map(|mean| {
                let unit: f64 = Exp1.sample(&mut r);
                mean * unit
            })
            .collect()
    }

    /// The first `m0` responders of round `τ`. Returns the full set for
    /// non-straggler policies.
    pub fn sample_straggler(&self, tau: u64) -> Vec<usize> {
        match &self.policy {
            Policy::Straggler { m0, .. } => first_responders(&self.straggler_delays(tau), *m0),
            _ => (0..self.m).collect(),
        }
    }

    /// The realised sequence `Ω^1, …, Ω^rounds`.
    pub fn realize(&self, rounds: u64) -> Vec<Vec<usize>> {
        (1..=rounds).map(|tau| self.next_omega(tau)).collect()
    }
}

/// `[start, end)` of group `g` when `m` clients are cut into `s0` contiguous
/// groups whose sizes differ by at most one.
fn group_bounds(m: usize, s0: usize, g: usize) -> (usize, usize) {
    let base = m / s0;
    let extra = m % s0;
    let start = g * base + g.min(extra);
    (start, start + base + usize::from(g < extra))
}

/// Indices of the `m0` smallest delays, ties broken by client index.
pub fn first_responders(delays: &[f64], m0: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..delays.len()).collect();
    order.sort_by(|&a, &b| delays[a].total_cmp(&delays[b]).then(a.cmp(&b)));
    order.truncate(m0);
    order.sort_unstable();
    order
}

/// True iff every aligned window `Ω^{js0+1} … Ω^{js0+s0}` covers all `m`
/// clients. A trailing partial window is not checked.
pub fn verify_cover(omegas: &[Vec<usize>], s0: usize, m: usize) -> bool {
    if s0 == 0 {
        return false;
    }
    omegas.chunks_exact(s0).all(|window| {
        let mut seen = vec![false; m];
        for &i in window.iter().flatten() {
            if i < m {
                seen[i] = true;
            }
        }
        seen.iter().all(|&s| s)
    })
}

/// Largest gap between consecutive selections of any client, counting the
/// virtual selection at round 0.
pub fn max_selection_gap(omegas: &[Vec<usize>], m: usize) -> usize {
    let mut last = vec![0usize; m];
    let mut worst = 0;
    for (t, omega) in omegas.iter().enumerate() {
        let tau = t + 1;
        for &i in omega {
            worst = worst.max(tau - last[i]);
            last[i] = tau;
        }
    }
    worst
}

/// Probability that a given client is selected at least once in a window
/// of independent uniform draws with the given set sizes:
/// `1 - Π_j (1 - |Ω_j|/m)`.
pub fn cover_probability(m: usize, sizes: &[usize]) -> f64 {
    let mut num: Option<u128> = Some(1);
    let mut den: Option<u128> = Some(1);
    for &s in sizes {
        let miss = m.saturating_sub(s) as u128;
        num = num.and_then(|v| v.checked_mul(miss));
        den = den.and_then(|v| v.checked_mul(m as u128));
    }
    match (num, den) {
        // Exact integers below 2^53 keep the quotient correctly rounded.
        (Some(a), Some(b)) if b < (1u128 << 53) => 1.0 - a as f64 / b as f64,
        _ => {
            1.0 - sizes
                .iter()
                .map(|&s| 1.0 - s.min(m) as f64 / m as f64)
                .product::<f64>()
        }
    }
}

/// The aggregation clock: `τ_k = ⌈k/k0⌉`, communication at `k ∈ {0, k0, 2k0, …}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundClock {
    k0: u64,
}

impl RoundClock {
    pub fn new(k0: u64) -> Result<Self> {
        if k0 == 0 {
            return Err(FedError::Config("k0 must be at least 1".into()));
        }
        Ok(Self { k0 })
    }

    pub fn k0(&self) -> u64 {
        self.k0
    }

    pub fn tau(&self, k: u64) -> u64 {
        k.div_ceil(self.k0)
    }

    pub fn is_communication_step(&self, k: u64) -> bool {
        k % self.k0 == 0
    }
}
