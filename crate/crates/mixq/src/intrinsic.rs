//! Intrinsic motivation: episodic k-NN pseudo-count novelty in a learned
//! action-prediction embedding space, modulated by a lifelong random-network
//! distillation signal.
//!
//! Per step the actor computes `r_episodic` against its own per-episode
//! memory and multiplies it by `min(max(α, 1), L)` where α is the
//! standardized RND prediction error. The embedding network, the RND
//! predictor and their statistics are trained on the learner from replayed
//! sequences.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::layers::{MlpArch, ParamBuilder, ParamSet, ParamVars};
use crate::nn::mat::Mat;
use crate::nn::tape::{Tape, Var};

/// Decay of the running averages kept by this module (`d_m²`, RND moments).
const STAT_DECAY: f64 = 0.99;
/// Floor on the RND error standard deviation once warmed up.
const RND_STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpisodicConfig {
    /// Number of nearest neighbours.
    pub k: usize,
    /// Pseudo-count constant added to the similarity.
    pub c: f64,
    /// Kernel epsilon.
    pub kernel_eps: f64,
    /// Cluster distance subtracted from normalized distances.
    pub xi: f64,
    /// Maximum similarity; above it the reward is zero.
    pub s_max: f64,
}

impl Default for EpisodicConfig {
    fn default() -> Self {
        EpisodicConfig {
            k: 10,
            c: 0.001,
            kernel_eps: 0.0001,
            xi: 0.008,
            s_max: 8.0,
        }
    }
}

/// Per-actor, per-episode store of embeddings with a persistent running
/// average of squared k-NN distances.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodicMemory {
    pub cfg: EpisodicConfig,
    embeddings: Vec<Vec<f64>>,
    dist_mean_sq: f64,
    dist_updates: u64,
}

impl EpisodicMemory {
    pub fn new(cfg: EpisodicConfig) -> Self {
        EpisodicMemory {
            cfg,
            embeddings: Vec::new(),
            dist_mean_sq: 0.0,
            dist_updates: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn dist_mean_sq(&self) -> f64 {
        self.dist_mean_sq
    }

    /// Episode boundary: embeddings are dropped, the distance running
    /// average persists across episodes.
    pub fn clear_episode(&mut self) {
        self.embeddings.clear();
    }

    /// Episodic reward for `embedding`, which is then inserted.
    ///
    /// Follows the episodic pseudo-count computation: k-NN squared
    /// distances, running-average normalization, cluster clipping, kernel
    /// similarity, inverse square-root count. An empty memory yields 0 (the
    /// pseudo-count is undefined with no neighbours).
    pub fn reward(&mut self, embedding: &[f64]) -> f64 {
        let r = self.peek_reward(embedding, true);
        self.embeddings.push(embedding.to_vec());
        r
    }

    /// Reward computation without inserting; `update_stats` controls whether
    /// the distance running average absorbs this query.
    pub fn peek_reward(&mut self, embedding: &[f64], update_stats: bool) -> f64 {
        if self.embeddings.is_empty() {
            return 0.0;
        }
        let k = self.cfg.k.min(self.embeddings.len());
        // linear scan; desk-scale episodes keep this cheap
        let mut dists: Vec<f64> = self
            .embeddings
            .iter()
            .map(|e| squared_distance(e, embedding))
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        dists.truncate(k);

        if update_stats {
            let batch_mean = dists.iter().sum::<f64>() / k as f64;
            if self.dist_updates == 0 {
                self.dist_mean_sq = batch_mean;
            } else {
                self.dist_mean_sq = STAT_DECAY * self.dist_mean_sq + (1.0 - STAT_DECAY) * batch_mean;
            }
            self.dist_updates += 1;
        }

        let mut kernel_sum = 0.0;
        for d in dists {
            let dn = if self.dist_mean_sq > 0.0 {
                (d / self.dist_mean_sq - self.cfg.xi).max(0.0)
            } else {
                0.0
            };
            kernel_sum += self.cfg.kernel_eps / (dn + self.cfg.kernel_eps);
        }
        let similarity = kernel_sum.sqrt() + self.cfg.c;
        if similarity > self.cfg.s_max {
            0.0
        } else {
            1.0 / similarity
        }
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Running moments of the RND prediction error.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct RndStats {
    mean: f64,
    second: f64,
    updates: u64,
}

impl RndStats {
    pub fn update_batch(&mut self, errors: &[f64]) {
        if errors.is_empty() {
            return;
        }
        let m1 = errors.iter().sum::<f64>() / errors.len() as f64;
        let m2 = errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64;
        if self.updates == 0 {
            self.mean = m1;
            self.second = m2;
        } else {
            self.mean = STAT_DECAY * self.mean + (1.0 - STAT_DECAY) * m1;
            self.second = STAT_DECAY * self.second + (1.0 - STAT_DECAY) * m2;
        }
        self.updates += 1;
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn std(&self) -> f64 {
        (self.second - self.mean * self.mean).max(0.0).sqrt().max(RND_STD_FLOOR)
    }
}

/// Standardized lifelong novelty `α_t = (err - μ_e) / σ_e`.
pub fn lifelong_modulator(stats: &RndStats, err: f64) -> f64 {
    (err - stats.mean()) / stats.std()
}

/// `r_NGU = r_episodic · min(max(α, 1), l_cap)`.
pub fn ngu_reward(r_episodic: f64, alpha: f64, l_cap: f64) -> f64 {
    r_episodic * alpha.max(1.0).min(l_cap)
}

/// Frozen random target network and trained predictor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RndPair {
    arch: MlpArch,
    /// Never updated after construction.
    pub target_params: ParamSet,
    pub predictor_params: ParamSet,
    pub stats: RndStats,
    pub dim: usize,
}

impl RndPair {
    pub fn new<R: Rng>(obs_dim: usize, hidden: usize, dim: usize, rng: &mut R) -> Self {
        let mut pb = ParamBuilder::new(rng);
        let arch = MlpArch::build(&mut pb, "rnd", &[obs_dim, hidden, dim]);
        let target_params = pb.set;
        // The predictor shares the architecture but gets its own independent
        // initialization, so the initial error is nonzero.
        let mut pb2 = ParamBuilder::new(rng);
        let _ = MlpArch::build(&mut pb2, "rnd", &[obs_dim, hidden, dim]);
        let predictor_params = pb2.set;
        RndPair {
            arch,
            target_params,
            predictor_params,
            stats: RndStats::default(),
            dim,
        }
    }

    /// `err_RND(x) = ||ĝ(x) - g(x)||²` for a single observation.
    pub fn error(&self, obs: &[f64]) -> f64 {
        let x = Mat::row(obs);
        let t = self.arch.forward_values(&self.target_params, &x);
        let p = self.arch.forward_values(&self.predictor_params, &x);
        squared_distance(&t.data, &p.data)
    }

    /// Batch of per-row errors, for learner statistics updates.
    pub fn errors_batch(&self, obs: &Mat) -> Vec<f64> {
        let t = self.arch.forward_values(&self.target_params, obs);
        let p = self.arch.forward_values(&self.predictor_params, obs);
        (0..obs.rows)
            .map(|i| squared_distance(t.row_slice(i), p.row_slice(i)))
            .collect()
    }

    /// Mean squared prediction error over the batch as a tape node rooted in
    /// the predictor parameters; the target is a constant by construction.
    pub fn loss_on_tape(&self, tape: &mut Tape, pv: &ParamVars, obs: &Mat) -> Var {
        let targets = self.arch.forward_values(&self.target_params, obs);
        let x = tape.constant(obs.clone());
        let pred = self.arch.forward(tape, pv, x);
        let t = tape.constant(targets);
        let d = tape.sub(pred, t);
        let sq = tape.mul(d, d);
        let w = Mat::filled(obs.rows, self.dim, 1.0 / obs.rows as f64);
        tape.weighted_sum_all(sq, w)
    }
}

/// Action-prediction embedding: `f(x)` plus an inverse-dynamics classifier
/// over `(f(x_t), f(x_{t+1}))`, trained jointly with one optimizer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ApEmbedder {
    embed: MlpArch,
    classifier: MlpArch,
    pub params: ParamSet,
    pub embed_dim: usize,
    pub num_actions: usize,
}

impl ApEmbedder {
    pub fn new<R: Rng>(
        obs_dim: usize,
        hidden: usize,
        embed_dim: usize,
        num_actions: usize,
        rng: &mut R,
    ) -> Self {
        let mut pb = ParamBuilder::new(rng);
        let embed = MlpArch::build(&mut pb, "ap.embed", &[obs_dim, hidden, embed_dim]);
        let classifier = MlpArch::build(&mut pb, "ap.cls", &[2 * embed_dim, hidden, num_actions]);
        ApEmbedder {
            embed,
            classifier,
            params: pb.set,
            embed_dim,
            num_actions,
        }
    }

    /// Embedding of a single observation with the given parameter set.
    pub fn embed_with(&self, params: &ParamSet, obs: &[f64]) -> Vec<f64> {
        self.embed.forward_values(params, &Mat::row(obs)).data
    }

    pub fn embed(&self, obs: &[f64]) -> Vec<f64> {
        self.embed_with(&self.params, obs)
    }

    /// Cross-entropy of predicting `actions[i]` from consecutive observation
    /// pairs, as a tape node.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        obs_t: &Mat,
        obs_t1: &Mat,
        actions: &[usize],
    ) -> Var {
        debug_assert_eq!(obs_t.rows, obs_t1.rows);
        debug_assert_eq!(obs_t.rows, actions.len());
        let xt = tape.constant(obs_t.clone());
        let xt1 = tape.constant(obs_t1.clone());
        let et = self.embed.forward(tape, pv, xt);
        let et1 = self.embed.forward(tape, pv, xt1);
        let pair = tape.concat_cols(et, et1);
        let logits = self.classifier.forward(tape, pv, pair);
        let probs = tape.group_softmax(logits, self.num_actions);
        let logp = tape.log_clamped(probs, 1e-12);
        let picked = tape.select_cols(logp, actions.to_vec());
        let w = Mat::filled(actions.len(), 1, -1.0 / actions.len() as f64);
        tape.weighted_sum_all(picked, w)
    }

    /// Classifier distribution for tests and diagnostics.
    pub fn predict(&self, obs_t: &[f64], obs_t1: &[f64]) -> Vec<f64> {
        let et = self.embed(obs_t);
        let et1 = self.embed(obs_t1);
        let mut pair = et;
        pair.extend_from_slice(&et1);
        let logits = self
            .classifier
            .forward_values(&self.params, &Mat::row(&pair));
        softmax(&logits.data)
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::ParamVars;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_memory_rewards_zero_then_inserts() {
        let mut mem = EpisodicMemory::new(EpisodicConfig::default());
        assert_eq!(mem.reward(&[1.0, 2.0]), 0.0);
        assert_eq!(mem.len(), 1);
    }

    #[test]
    fn clustered_neighbors_give_inverse_sqrt_count() {
        // Four stored copies of the embedding: distances 0, K = 1 each,
        // s = sqrt(4) + c, reward = 1/(2 + 0.001).
        let cfg = EpisodicConfig::default();
        let mut mem = EpisodicMemory::new(cfg);
        let e = vec![0.5, -0.25, 1.0];
        for _ in 0..4 {
            mem.embeddings.push(e.clone());
        }
        let r = mem.peek_reward(&e, true);
        assert!((r - 1.0 / 2.001).abs() < 1e-9, "{r}");
        assert!((r - 0.49975).abs() < 1e-5);
    }

    #[test]
    fn similarity_above_cap_returns_zero() {
        let cfg = EpisodicConfig {
            s_max: 1.5,
            ..Default::default()
        };
        let mut mem = EpisodicMemory::new(cfg);
        let e = vec![1.0, 1.0];
        for _ in 0..4 {
            mem.embeddings.push(e.clone());
        }
        // s = sqrt(4) + c > 1.5
        assert_eq!(mem.peek_reward(&e, true), 0.0);
    }

    #[test]
    fn repetition_decays_to_zero_with_reachable_cap() {
        // With s_max below sqrt(k), repeating one embedding drives the
        // reward down monotonically (after the empty-memory first call)
        // until the similarity cap zeroes it.
        let cfg = EpisodicConfig {
            k: 10,
            s_max: 2.5,
            ..Default::default()
        };
        let mut mem = EpisodicMemory::new(cfg);
        let e = vec![0.3, 0.7];
        let first = mem.reward(&e);
        assert_eq!(first, 0.0);
        let mut prev = f64::INFINITY;
        let mut hit_zero = false;
        for _ in 0..12 {
            let r = mem.reward(&e);
            assert!(r <= prev + 1e-12, "{r} > {prev}");
            prev = r;
            if r == 0.0 {
                hit_zero = true;
            }
        }
        assert!(hit_zero, "similarity cap never engaged");
    }

    #[test]
    fn default_config_keeps_identical_embeddings_rewarded() {
        // With the default s_max = 8 and k = 10 the cap is out of reach
        // (max similarity is sqrt(10) + c), so repetition floors at
        // 1/(sqrt(k) + c) instead of 0.
        let mut mem = EpisodicMemory::new(EpisodicConfig::default());
        let e = vec![0.0, 4.0];
        for _ in 0..40 {
            mem.reward(&e);
        }
        let r = mem.peek_reward(&e, false);
        assert!((r - 1.0 / (10f64.sqrt() + 0.001)).abs() < 1e-9);
    }

    #[test]
    fn novelty_premium() {
        // Against the same memory and statistics, an embedding far from all
        // entries earns strictly more than one sitting on a cluster.
        let cfg = EpisodicConfig::default();
        let mut mem = EpisodicMemory::new(cfg);
        for i in 0..10 {
            mem.embeddings.push(vec![0.01 * i as f64, 0.0]);
        }
        mem.dist_mean_sq = 0.001;
        mem.dist_updates = 5;
        let near = mem.peek_reward(&[0.0, 0.0], false);
        let far = mem.peek_reward(&[100.0, 100.0], false);
        assert!(far > near, "far {far} <= near {near}");
    }

    #[test]
    fn memory_reset_restores_empty_reward() {
        let mut mem = EpisodicMemory::new(EpisodicConfig::default());
        for i in 0..20 {
            mem.reward(&[i as f64, 1.0]);
        }
        assert!(mem.dist_mean_sq() > 0.0);
        mem.clear_episode();
        assert_eq!(mem.reward(&[5.0, 5.0]), 0.0);
        // the distance statistics persist across the boundary
        assert!(mem.dist_mean_sq() > 0.0);
    }

    #[test]
    fn ngu_reward_clamps() {
        assert_eq!(ngu_reward(0.7, 0.2, 5.0), 0.7);
        assert_eq!(ngu_reward(0.7, -3.0, 5.0), 0.7);
        assert!((ngu_reward(0.5, 10.0, 5.0) - 2.5).abs() < 1e-12);
        assert_eq!(ngu_reward(0.0, 100.0, 5.0), 0.0);
    }

    #[test]
    fn ngu_reward_range_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        use rand::Rng;
        let c = 0.001;
        let l_cap = 5.0;
        for _ in 0..1000 {
            let r_ep = rng.gen_range(0.0..1.0 / c);
            let alpha = rng.gen_range(-10.0..50.0);
            let r = ngu_reward(r_ep, alpha, l_cap);
            assert!((0.0..=l_cap / c).contains(&r));
            if alpha <= 1.0 {
                assert_eq!(r, r_ep);
            }
        }
    }

    #[test]
    fn lifelong_modulator_examples() {
        let stats = RndStats {
            mean: 2.0,
            second: 2.0 * 2.0 + 0.25, // std 0.5
            updates: 10,
        };
        assert!((lifelong_modulator(&stats, 2.0) - 0.0).abs() < 1e-9);
        assert!((lifelong_modulator(&stats, 2.5) - 1.0).abs() < 1e-9);
        assert!((lifelong_modulator(&stats, 3.5) - 3.0).abs() < 1e-9);
    }

    #[test]
    fn rnd_error_zero_when_predictor_equals_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pair = RndPair::new(4, 8, 3, &mut rng);
        pair.predictor_params = pair.target_params.clone();
        assert_eq!(pair.error(&[0.1, 0.2, 0.3, 0.4]), 0.0);
        let obs = Mat::from_rows(&[vec![0.0; 4], vec![1.0, 0.0, 0.5, 0.25]]);
        assert_eq!(pair.errors_batch(&obs), vec![0.0, 0.0]);
    }

    #[test]
    fn rnd_error_matches_independent_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pair = RndPair::new(5, 8, 8, &mut rng);
        let obs = vec![0.3, -0.1, 0.7, 0.0, 0.9];
        let err = pair.error(&obs);
        // recompute with explicit loops over the two parameter sets
        let manual = |params: &ParamSet, obs: &[f64]| -> Vec<f64> {
            let w0 = &params.mats[0];
            let b0 = &params.mats[1];
            let mut h = vec![0.0; w0.cols];
            for j in 0..w0.cols {
                for (i, &x) in obs.iter().enumerate() {
                    h[j] += x * w0.at(i, j);
                }
                h[j] = (h[j] + b0.data[j]).max(0.0);
            }
            let w1 = &params.mats[2];
            let b1 = &params.mats[3];
            let mut out = vec![0.0; w1.cols];
            for j in 0..w1.cols {
                for (i, &x) in h.iter().enumerate() {
                    out[j] += x * w1.at(i, j);
                }
                out[j] += b1.data[j];
            }
            out
        };
        let t = manual(&pair.target_params, &obs);
        let p = manual(&pair.predictor_params, &obs);
        let expect: f64 = t.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum();
        assert!((err - expect).abs() < 1e-10, "{err} vs {expect}");
        assert!(err > 0.0);
    }

    #[test]
    fn rnd_loss_zero_at_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut pair = RndPair::new(4, 6, 3, &mut rng);
        pair.predictor_params = pair.target_params.clone();
        let obs = Mat::from_rows(&[vec![0.1; 4], vec![0.9; 4]]);
        let mut tape = Tape::new();
        let pv = ParamVars::load(&mut tape, &pair.predictor_params, true);
        let loss = pair.loss_on_tape(&mut tape, &pv, &obs);
        assert_eq!(tape.scalar(loss), 0.0);
    }

    #[test]
    fn ap_loss_uniform_classifier_is_ln_a() {
        // zeroed classifier output layer -> uniform prediction -> CE = ln A
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut ap = ApEmbedder::new(4, 6, 3, 4, &mut rng);
        let n = ap.params.mats.len();
        for m in ap.params.mats[n - 2..].iter_mut() {
            m.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let obs_t = Mat::from_rows(&[vec![0.1; 4], vec![0.5; 4]]);
        let obs_t1 = Mat::from_rows(&[vec![0.2; 4], vec![0.6; 4]]);
        let mut tape = Tape::new();
        let pv = ParamVars::load(&mut tape, &ap.params, true);
        let loss = ap.loss_on_tape(&mut tape, &pv, &obs_t, &obs_t1, &[1, 3]);
        assert!((tape.scalar(loss) - (4.0f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn rnd_stats_warm_start_and_floor() {
        let mut s = RndStats::default();
        s.update_batch(&[2.0, 2.0]);
        assert_eq!(s.mean(), 2.0);
        assert_eq!(s.std(), RND_STD_FLOOR); // zero variance floors
        s.update_batch(&[4.0, 0.0]);
        assert!(s.std() > RND_STD_FLOOR);
        assert!(s.mean() < 2.01 && s.mean() > 1.9);
    }
}
