//! The N-policy mixture family (β_j, γ_j) and the discounted UCB-Tuned
//! meta-controller that selects a mixture per episode.
//!
//! Mixture 0 is purely extrinsic with the longest horizon; mixture N-1 uses
//! the full intrinsic weight and the shortest horizon. Intrinsic weights
//! follow the sigmoid schedule `β_IM σ(8 (2j - (N-2)) / (N-2))` between the
//! pinned endpoints; discounts interpolate `1 - γ` log-linearly between the
//! endpoints.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FamilyError {
    #[error("a mixture family needs at least 2 members, got {0}")]
    TooFewMixtures(usize),
    #[error("beta_im must be positive, got {0}")]
    BadBetaIm(f64),
    #[error("discount ordering violated: need 0 < gamma_min <= gamma_max < 1, got ({min}, {max})")]
    BadDiscounts { min: f64, max: f64 },
    #[error("bandit arm {arm} out of range (n = {n})")]
    ArmOutOfRange { arm: usize, n: usize },
}

/// Intrinsic-reward weights for `n` mixtures, maximum `beta_im`.
pub fn build_betas(n: usize, beta_im: f64) -> Result<Vec<f64>, FamilyError> {
    if n < 2 {
        return Err(FamilyError::TooFewMixtures(n));
    }
    if beta_im <= 0.0 {
        return Err(FamilyError::BadBetaIm(beta_im));
    }
    let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
    Ok((0..n)
        .map(|j| {
            if j == 0 {
                0.0
            } else if j == n - 1 {
                beta_im
            } else {
                let arg = 8.0 * (2.0 * j as f64 - (n as f64 - 2.0)) / (n as f64 - 2.0);
                beta_im * sigmoid(arg)
            }
        })
        .collect())
}

/// Discounts for `n` mixtures, interpolating `1 - γ` log-linearly from
/// `gamma_max` at mixture 0 down to `gamma_min` at mixture n-1.
pub fn build_gammas(n: usize, gamma_max: f64, gamma_min: f64) -> Result<Vec<f64>, FamilyError> {
    if n < 2 {
        return Err(FamilyError::TooFewMixtures(n));
    }
    if !(0.0 < gamma_min && gamma_min <= gamma_max && gamma_max < 1.0) {
        return Err(FamilyError::BadDiscounts {
            min: gamma_min,
            max: gamma_max,
        });
    }
    let log_max = (1.0 - gamma_max).ln();
    let log_min = (1.0 - gamma_min).ln();
    Ok((0..n)
        .map(|j| {
            let w = j as f64 / (n as f64 - 1.0);
            1.0 - ((1.0 - w) * log_max + w * log_min).exp()
        })
        .collect())
}

/// The immutable mixture family; freely shareable across contexts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureFamily {
    pub n: usize,
    pub beta_im: f64,
    pub gamma_max: f64,
    pub gamma_min: f64,
    pub betas: Vec<f64>,
    pub gammas: Vec<f64>,
}

impl MixtureFamily {
    pub fn new(n: usize, beta_im: f64, gamma_max: f64, gamma_min: f64) -> Result<Self, FamilyError> {
        let betas = build_betas(n, beta_im)?;
        let gammas = build_gammas(n, gamma_max, gamma_min)?;
        Ok(MixtureFamily {
            n,
            beta_im,
            gamma_max,
            gamma_min,
            betas,
            gammas,
        })
    }
}

/// Per-arm discounted statistics for the meta-controller.
///
/// The discounted mean and second moment are stored directly and the
/// discounted count separately, so decay ticks touch only the count; the
/// mean of a fully-decayed arm stays queryable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BanditState {
    pub gamma: f64,
    pub beta: f64,
    pub epsilon: f64,
    count: Vec<f64>,
    mean: Vec<f64>,
    second_moment: Vec<f64>,
    visits: Vec<u64>,
}

impl BanditState {
    pub fn new(n_arms: usize, gamma: f64, beta: f64, epsilon: f64) -> Self {
        BanditState {
            gamma,
            beta,
            epsilon,
            count: vec![0.0; n_arms],
            mean: vec![0.0; n_arms],
            second_moment: vec![0.0; n_arms],
            visits: vec![0; n_arms],
        }
    }

    pub fn n_arms(&self) -> usize {
        self.count.len()
    }

    pub fn discounted_count(&self, arm: usize) -> f64 {
        self.count[arm]
    }

    pub fn mean(&self, arm: usize) -> f64 {
        self.mean[arm]
    }

    /// Multiplies every arm's discounted statistics by γ. Equivalent to
    /// scaling the raw discounted sums; the stored mean is unchanged since
    /// numerator and denominator scale identically.
    pub fn decay_tick(&mut self) {
        for c in self.count.iter_mut() {
            *c *= self.gamma;
        }
    }

    /// Decays all arms, then credits `episode_return` to `arm`.
    pub fn update(&mut self, arm: usize, episode_return: f64) -> Result<(), FamilyError> {
        let n = self.n_arms();
        if arm >= n {
            return Err(FamilyError::ArmOutOfRange { arm, n });
        }
        self.decay_tick();
        let c = self.count[arm];
        let new_c = c + 1.0;
        self.mean[arm] = (self.mean[arm] * c + episode_return) / new_c;
        self.second_moment[arm] =
            (self.second_moment[arm] * c + episode_return * episode_return) / new_c;
        self.count[arm] = new_c;
        self.visits[arm] += 1;
        Ok(())
    }

    fn variance(&self, arm: usize) -> f64 {
        (self.second_moment[arm] - self.mean[arm] * self.mean[arm]).max(0.0)
    }

    /// UCB-Tuned score: discounted mean plus `beta` times the variance-aware
    /// bonus `sqrt((ln N / n_i) min(1/4, V_i + sqrt(2 ln N / n_i)))`.
    fn score(&self, arm: usize, total: f64) -> f64 {
        let n_i = self.count[arm];
        let log_total = total.max(1.0).ln().max(0.0);
        let v = self.variance(arm) + (2.0 * log_total / n_i).sqrt();
        self.mean[arm] + self.beta * (log_total / n_i * v.min(0.25)).sqrt()
    }

    /// Greedy arm: argmax of the discounted mean, ties to the lowest index.
    /// No bonus and no exploration; this is the evaluator's query.
    pub fn greedy(&self) -> usize {
        argmax_lowest(self.mean.iter().cloned())
    }

    /// Acting arm: with probability ε a uniformly random arm; otherwise the
    /// UCB-Tuned argmax. Arms with zero discounted count come first, lowest
    /// index first.
    pub fn select<R: Rng>(&self, rng: &mut R) -> usize {
        if self.epsilon > 0.0 && rng.gen_bool(self.epsilon.min(1.0)) {
            return rng.gen_range(0..self.n_arms());
        }
        if let Some(unvisited) = self.count.iter().position(|&c| c == 0.0) {
            return unvisited;
        }
        let total: f64 = self.count.iter().sum();
        argmax_lowest((0..self.n_arms()).map(|a| self.score(a, total)))
    }
}

fn argmax_lowest(scores: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, s) in scores.enumerate() {
        if s > best_score {
            best = i;
            best_score = s;
        }
    }
    best
}
