//! Temperature softmax and the batch-mixed sparsity machinery.
//!
//! The relaxation used throughout is `softmax(row / t)`. A small temperature
//! (`t_sp`) sharpens the distribution toward one-hot, a larger one (`t_sm`)
//! keeps it smooth. Per batch, a Bernoulli indicator picks which of the two
//! temperatures is in effect; the Bernoulli probability is linearly scheduled
//! over epochs after a warmup. The entropy summation over all edge
//! distributions (at temperature 1) is the sparsity diagnostic recorded each
//! epoch.

use crate::autodiff::{AutodiffError, Graph, NodeId, Tensor};
use crate::space::ArchParams;
use rand::distributions::{Bernoulli, Distribution};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SparseError {
    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
    #[error("temperature pair invalid: t_sp={t_sp}, t_sm={t_sm}")]
    BadTemperaturePair { t_sp: f64, t_sm: f64 },
    #[error("probability must lie in [0,1], got {0}")]
    BadProbability(f64),
    #[error("mix plan invalid: {0}")]
    BadMixPlan(String),
    #[error("epoch {epoch} outside schedule range 0..={total}")]
    EpochOutOfRange { epoch: usize, total: usize },
    #[error("distribution invalid: {0}")]
    BadDistribution(String),
    #[error("non-finite input row")]
    NonFiniteRow,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// The sparse/smooth temperature pair, `0 < t_sp <= t_sm`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperaturePair {
    pub t_sp: f64,
    pub t_sm: f64,
}

impl TemperaturePair {
    pub fn new(t_sp: f64, t_sm: f64) -> Result<Self, SparseError> {
        let pair = TemperaturePair { t_sp, t_sm };
        pair.validate()?;
        Ok(pair)
    }

    pub fn validate(&self) -> Result<(), SparseError> {
        let ok = self.t_sp > 0.0
            && self.t_sp.is_finite()
            && self.t_sm.is_finite()
            && self.t_sp <= self.t_sm;
        if !ok {
            return Err(SparseError::BadTemperaturePair {
                t_sp: self.t_sp,
                t_sm: self.t_sm,
            });
        }
        Ok(())
    }
}

impl Default for TemperaturePair {
    /// Sparse temperature 1e-3 with the smooth one 10x larger.
    fn default() -> Self {
        TemperaturePair {
            t_sp: 1e-3,
            t_sm: 1e-2,
        }
    }
}

/// A per-edge probability distribution over candidate operations.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeDistribution {
    probs: Vec<f64>,
}

impl EdgeDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, SparseError> {
        if probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(SparseError::BadDistribution(
                "negative or non-finite entry".into(),
            ));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(SparseError::BadDistribution(format!(
                "sum {total} not within 1e-9 of 1"
            )));
        }
        Ok(EdgeDistribution { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Shannon entropy in nats, with `0 ln 0 = 0`.
    pub fn entropy(&self) -> f64 {
        entropy_of(&self.probs)
    }
}

fn entropy_of(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 })
        .sum::<f64>()
}

/// `softmax(row / t)` with max-subtraction for stability.
///
/// At `t` near 1e-3 the scaled logits reach magnitude ~1000, so the naive
/// exponentials would overflow; subtracting the row maximum keeps every
/// exponent non-positive. The argmax of the output always equals the argmax
/// of the input row.
pub fn softmax_t(row: &[f64], t: f64) -> Result<EdgeDistribution, SparseError> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(SparseError::BadTemperature(t));
    }
    if row.iter().any(|x| !x.is_finite()) {
        return Err(SparseError::NonFiniteRow);
    }
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&x| ((x - max) / t).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(EdgeDistribution {
        probs: exps.iter().map(|e| e / total).collect(),
    })
}

/// Closed-form Jacobian of the temperature softmax at output `y`:
/// diagonal `(y_i - y_i^2)/t`, off-diagonal `-y_i y_j / t`. Row-major `M x M`.
pub fn softmax_jacobian(y: &EdgeDistribution, t: f64) -> Result<Vec<f64>, SparseError> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(SparseError::BadTemperature(t));
    }
    let p = &y.probs;
    let m = p.len();
    let mut jac = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            jac[i * m + j] = if i == j {
                (p[i] - p[i] * p[i]) / t
            } else {
                -(p[i] * p[j]) / t
            };
        }
    }
    Ok(jac)
}

/// Eq.-style branch select: indicator 1 means the sparse temperature.
pub fn select_distribution(
    row: &[f64],
    phi: bool,
    temps: &TemperaturePair,
) -> Result<EdgeDistribution, SparseError> {
    let t = if phi { temps.t_sp } else { temps.t_sm };
    softmax_t(row, t)
}

/// The linear mixing-probability schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixPlan {
    pub p_low: f64,
    pub p_up: f64,
    pub total_epochs: usize,
    pub warmup_epochs: usize,
}

impl MixPlan {
    pub fn new(
        p_low: f64,
        p_up: f64,
        total_epochs: usize,
        warmup_epochs: usize,
    ) -> Result<Self, SparseError> {
        let plan = MixPlan {
            p_low,
            p_up,
            total_epochs,
            warmup_epochs,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<(), SparseError> {
        if !(0.0..=1.0).contains(&self.p_low) {
            return Err(SparseError::BadMixPlan(format!(
                "p_low {} outside [0,1]",
                self.p_low
            )));
        }
        if self.p_up < self.p_low || !self.p_up.is_finite() {
            return Err(SparseError::BadMixPlan(format!(
                "p_up {} below p_low {}",
                self.p_up, self.p_low
            )));
        }
        if self.total_epochs == 0 {
            return Err(SparseError::BadMixPlan("total_epochs must be >= 1".into()));
        }
        if self.warmup_epochs >= self.total_epochs {
            return Err(SparseError::BadMixPlan(format!(
                "warmup {} must be below total {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        Ok(())
    }
}

/// Scheduled mixing probability at epoch `i`: 0 during warmup, then linear
/// from `p_low` to `p_up` over the remaining epochs.
///
/// Returns the raw formula value; the consumer clamps to [0,1] before
/// Bernoulli sampling (plans may place `p_up` past the boundary).
pub fn p_schedule(plan: &MixPlan, epoch: usize) -> Result<f64, SparseError> {
    if epoch > plan.total_epochs {
        return Err(SparseError::EpochOutOfRange {
            epoch,
            total: plan.total_epochs,
        });
    }
    if epoch < plan.warmup_epochs {
        return Ok(0.0);
    }
    let i = epoch as f64;
    let i_wp = plan.warmup_epochs as f64;
    let total = plan.total_epochs as f64;
    // multiply before dividing so the i = I endpoint lands exactly on p_up
    Ok(plan.p_low + (plan.p_up - plan.p_low) * (i - i_wp) / (total - i_wp))
}

/// Per-batch sparse/smooth indicators for one epoch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndicatorVec {
    flags: Vec<bool>,
}

impl IndicatorVec {
    pub fn all_smooth(n: usize) -> Self {
        IndicatorVec {
            flags: vec![false; n],
        }
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn count_sparse(&self) -> usize {
        self.flags.iter().filter(|f| **f).count()
    }
}

/// `n` independent Bernoulli(p) draws from a counter-based generator seeded
/// with `seed`. Same seed, same vector.
pub fn sample_indicators(p: f64, n: usize, seed: u64) -> Result<IndicatorVec, SparseError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(SparseError::BadProbability(p));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bern = Bernoulli::new(p).map_err(|_| SparseError::BadProbability(p))?;
    Ok(IndicatorVec {
        flags: (0..n).map(|_| bern.sample(&mut rng)).collect(),
    })
}

/// Information entropy summation: the sum over edges of the entropy of
/// `softmax(row, 1)`. The temperature here is always 1 so the diagnostic is
/// comparable across training temperatures; result lies in `[0, E ln M]`.
pub fn ies(params: &ArchParams) -> f64 {
    (0..params.num_edges())
        .map(|e| {
            softmax_t(params.row(e), 1.0)
                .expect("finite params row")
                .entropy()
        })
        .sum()
}

/// In-graph temperature softmax over a length-M vector node.
///
/// Built from the primitive ops so gradients flow through the division by the
/// partition sum: `exp(s - max)` divided by its sum via `exp(-log(sum))`. The
/// subtracted maximum is treated as a constant, which leaves both the value
/// and the gradient of the softmax unchanged.
pub fn graph_softmax(g: &mut Graph, row: NodeId, t: f64) -> Result<NodeId, SparseError> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(SparseError::BadTemperature(t));
    }
    let n = g.value(row).numel();
    let scaled = g.scale_const(1.0 / t, row)?;
    let max = g
        .value(scaled)
        .data()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let neg_max = g.constant(Tensor::new(vec![n], vec![-max; n])?)?;
    let shifted = g.add(scaled, neg_max)?;
    let exps = g.exp(shifted)?;
    let total = g.sum(exps)?;
    let log_total = g.log(total)?;
    let neg_log_total = g.scale_const(-1.0, log_total)?;
    let inv_total = g.exp(neg_log_total)?;
    let probs = g.scale(inv_total, exps)?;
    Ok(probs)
}
