//! Training-loss building blocks: per-mixture TD-error normalization,
//! trust-region masking for online-bootstrap updates, cross-mixture loss
//! weighting, policy distillation targets, and replay priorities.
//!
//! Everything here is value-level and deterministic; the learner applies
//! these quantities (masks, divisors, weights, targets) as constants around
//! the differentiable graph, so a masked timestep contributes exactly zero
//! gradient and normalizers are not differentiated through.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Normalization floor ε for σ_j.
pub const NORM_FLOOR: f64 = 0.01;
/// ε of the ε-greedy distillation target; keeps policy logits bounded.
pub const DISTILL_EPSILON: f64 = 1e-4;
/// Priorities are floored at a tiny positive constant so sampling stays
/// well-defined.
pub const PRIORITY_FLOOR: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum LearningError {
    #[error("unknown loss mode: {0}")]
    UnknownMode(String),
}

/// How the value loss decomposes across the extrinsic/intrinsic heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossMode {
    /// Squared error of `Q_e + β Q_i` against the combined target.
    Combined,
    /// Separate squared errors per component, the decomposed form.
    Decomposed,
    /// One head predicts the combined value directly.
    SingleHead,
}

impl std::str::FromStr for LossMode {
    type Err = LearningError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "combined" => Ok(LossMode::Combined),
            "decomposed" => Ok(LossMode::Decomposed),
            "single_head" => Ok(LossMode::SingleHead),
            other => Err(LearningError::UnknownMode(other.to_string())),
        }
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossMode::Combined => "combined",
            LossMode::Decomposed => "decomposed",
            LossMode::SingleHead => "single_head",
        })
    }
}

/// Per-mixture exponential accumulators of TD-error moments, updated with
/// importance-sampling weights on the learner before each normalization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunningStats {
    pub decay: f64,
    mean: Vec<f64>,
    second: Vec<f64>,
}

impl RunningStats {
    pub fn new(n_mixtures: usize, decay: f64) -> Self {
        RunningStats {
            decay,
            mean: vec![0.0; n_mixtures],
            second: vec![0.0; n_mixtures],
        }
    }

    /// Folds the current batch's IS-weighted moments into the running
    /// estimate for mixture `j`.
    pub fn update(&mut self, j: usize, errors: &[f64], is_weights: &[f64]) {
        debug_assert_eq!(errors.len(), is_weights.len());
        let wsum: f64 = is_weights.iter().sum();
        if wsum <= 0.0 || errors.is_empty() {
            return;
        }
        let m1: f64 = errors.iter().zip(is_weights).map(|(&e, &w)| w * e).sum::<f64>() / wsum;
        let m2: f64 = errors
            .iter()
            .zip(is_weights)
            .map(|(&e, &w)| w * e * e)
            .sum::<f64>()
            / wsum;
        self.mean[j] = self.decay * self.mean[j] + (1.0 - self.decay) * m1;
        self.second[j] = self.decay * self.second[j] + (1.0 - self.decay) * m2;
    }

    pub fn running_std(&self, j: usize) -> f64 {
        (self.second[j] - self.mean[j] * self.mean[j]).max(0.0).sqrt()
    }
}

/// Result of normalizing one mixture's batch of TD errors.
#[derive(Debug, Clone)]
pub struct Normalized {
    pub errors: Vec<f64>,
    pub sigma_batch: f64,
    /// The active divisor `σ_j = max(σ_running, σ_batch, ε)`.
    pub sigma: f64,
}

/// Divides TD errors by `σ_j = max(σ_running, σ_batch, ε)`.
///
/// The batch standard deviation branch divides in two stages (first by the
/// batch max-magnitude, then by the std of that unit-scaled vector), which
/// makes the output exactly invariant to rescaling the error vector: the
/// real-valued quotients are unchanged, so IEEE rounding produces identical
/// bits.
pub fn normalize_td(errors: &[f64], running_std: f64) -> Normalized {
    let m = errors.iter().fold(0.0f64, |acc, e| acc.max(e.abs()));
    let (unit, s) = if m > 0.0 {
        let unit: Vec<f64> = errors.iter().map(|e| e / m).collect();
        let n = unit.len() as f64;
        let mu: f64 = unit.iter().sum::<f64>() / n;
        let var: f64 = unit.iter().map(|r| r * r).sum::<f64>() / n - mu * mu;
        (unit, var.max(0.0).sqrt())
    } else {
        (vec![0.0; errors.len()], 0.0)
    };
    let sigma_batch = m * s;
    if sigma_batch >= running_std && sigma_batch >= NORM_FLOOR {
        Normalized {
            errors: unit.iter().map(|r| r / s).collect(),
            sigma_batch,
            sigma: sigma_batch,
        }
    } else {
        let sigma = running_std.max(NORM_FLOOR);
        Normalized {
            errors: errors.iter().map(|e| e / sigma).collect(),
            sigma_batch,
            sigma,
        }
    }
}

/// Per-timestep trust-region verdicts; `true` keeps the timestep in the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct TrustRegionVerdict {
    pub keep: Vec<bool>,
}

impl TrustRegionVerdict {
    pub fn masked_fraction(&self) -> f64 {
        if self.keep.is_empty() {
            return 0.0;
        }
        self.keep.iter().filter(|&&k| !k).count() as f64 / self.keep.len() as f64
    }
}

fn sgn(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x.signum()
    }
}

/// Masks a timestep out iff the online value sits outside the band of width
/// `alpha * sigma` around the target network's value AND the TD error points
/// further away:
/// `|Q_θ - Q_θT| > α σ_j` and `sgn(Q_θ - Q_θT) != sgn(Q_θ - G)`.
pub fn trust_region_mask(
    q_online: &[f64],
    q_target: &[f64],
    g: &[f64],
    sigma: f64,
    alpha: f64,
) -> TrustRegionVerdict {
    debug_assert_eq!(q_online.len(), q_target.len());
    debug_assert_eq!(q_online.len(), g.len());
    let keep = q_online
        .iter()
        .zip(q_target)
        .zip(g)
        .map(|((&qo, &qt), &gt)| {
            let gap = qo - qt;
            let outside = gap.abs() > alpha * sigma;
            let points_away = sgn(gap) != sgn(qo - gt);
            !(outside && points_away)
        })
        .collect();
    TrustRegionVerdict { keep }
}

/// Eq.-5 weight of mixture `j`: `η 1{j = j_μ} + (1-η)/N`.
pub fn cross_mixture_weights(eta: f64, n: usize, j_mu: usize) -> Vec<f64> {
    (0..n)
        .map(|j| if j == j_mu { eta + (1.0 - eta) / n as f64 } else { (1.0 - eta) / n as f64 })
        .collect()
}

/// Total loss `η L_{j_μ} + (1-η)/N Σ_j L_j`.
pub fn combine_mixture_losses(losses: &[f64], eta: f64, j_mu: usize) -> f64 {
    cross_mixture_weights(eta, losses.len(), j_mu)
        .iter()
        .zip(losses)
        .map(|(&w, &l)| w * l)
        .sum()
}

/// ε-greedy distribution over actions induced by a Q row; ties break to the
/// lowest index.
pub fn epsilon_greedy_target(q: &[f64], epsilon: f64) -> Vec<f64> {
    let a = q.len();
    let mut best = 0;
    for (i, &v) in q.iter().enumerate() {
        if v > q[best] {
            best = i;
        }
    }
    (0..a)
        .map(|i| {
            let base = epsilon / a as f64;
            if i == best {
                base + 1.0 - epsilon
            } else {
                base
            }
        })
        .collect()
}

/// Temperature-sharpened target policy `softmax(log π / τ)`, with zero
/// probabilities clamped to a tiny floor before the log.
pub fn sharpen_policy(probs: &[f64], tau: f64) -> Vec<f64> {
    assert!(tau > 0.0, "temperature must be positive");
    let logs: Vec<f64> = probs.iter().map(|&p| p.max(1e-12).ln() / tau).collect();
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logs.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

/// `KL(p || q)` with both distributions clamped away from zero.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            if pi <= 0.0 {
                0.0
            } else {
                pi * (pi.max(1e-12).ln() - qi.max(1e-12).ln())
            }
        })
        .sum()
}

/// Cross-entropy `-Σ_a target(a) ln probs(a)`.
pub fn cross_entropy(target: &[f64], probs: &[f64]) -> f64 {
    target
        .iter()
        .zip(probs)
        .map(|(&t, &p)| if t == 0.0 { 0.0 } else { -t * p.max(1e-12).ln() })
        .sum()
}

/// Value-level distillation loss for one timestep and one mixture: the
/// cross-entropy from the ε-greedy target onto the distilled policy, masked
/// where the target-vs-online policy KL exceeds `c_kl`.
pub fn distillation_loss(
    q_online: &[f64],
    policy_online: &[f64],
    policy_target: &[f64],
    c_kl: f64,
    epsilon_greedy: f64,
) -> f64 {
    let kl = kl_divergence(policy_target, policy_online);
    if kl > c_kl {
        return 0.0;
    }
    let target = epsilon_greedy_target(q_online, epsilon_greedy);
    cross_entropy(&target, policy_online)
}

/// Sequence priority: `w_max max|δ̃| + (1 - w_max) mean|δ̃|`, floored.
pub fn compute_priority(normalized_errors: &[f64], w_max: f64) -> f64 {
    if normalized_errors.is_empty() {
        return PRIORITY_FLOOR;
    }
    let abs: Vec<f64> = normalized_errors.iter().map(|e| e.abs()).collect();
    let max = abs.iter().cloned().fold(0.0f64, f64::max);
    let mean = abs.iter().sum::<f64>() / abs.len() as f64;
    (w_max * max + (1.0 - w_max) * mean).max(PRIORITY_FLOOR)
}
