//! Acting loops. An actor holds one environment, one episodic memory and a
//! fixed replay shard; at each episode start it queries the bandit for a
//! mixture and fetches the newest parameter snapshot. Evaluators run whole
//! episodes greedily on the EMA evaluation parameters and never touch
//! replay.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::env::Environment;
use crate::intrinsic::{lifelong_modulator, ngu_reward, EpisodicConfig, EpisodicMemory};
use crate::nn::agent::{feature_vec, AgentArch, DepthMask, PrevStep};
use crate::nn::mat::Mat;
use crate::replay::{ReplaySet, StepRecord, WindowAssembler};

use super::snapshot::{Snapshot, SnapshotRegister};

/// Per-actor exploration ladder `ε_l = base^(1 + power * l / (L-1))`.
pub fn actor_epsilon(base: f64, power: f64, l: usize, n_actors: usize) -> f64 {
    if n_actors <= 1 {
        return base;
    }
    base.powf(1.0 + power * l as f64 / (n_actors as f64 - 1.0))
}

/// Greedy action: over the distilled policy head normally, over combined Q
/// when distillation is disabled. Ties break to the lowest index.
fn policy_action(est_probs: &[f64], q_comb: &[f64], use_distilled: bool) -> usize {
    argmax(if use_distilled { est_probs } else { q_comb })
}

fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// One finished-episode report.
#[derive(Debug, Clone)]
pub struct EpisodeReport {
    pub mixture: usize,
    pub return_ext: f64,
    pub frames: u64,
}

pub struct Actor {
    pub id: usize,
    pub epsilon: f64,
    pub shard: usize,
    env: Box<dyn Environment>,
    memory: EpisodicMemory,
    assembler: WindowAssembler,
    rng: ChaCha8Rng,
    arch: Arc<AgentArch>,
    snapshot: Arc<Snapshot>,
    all_keep: Vec<DepthMask>,
    // episode state
    pub mixture: usize,
    state: Mat,
    obs: Vec<f64>,
    prev: PrevStep,
    return_ext: f64,
    needs_reset: bool,
    rnd_scale: f64,
    l_cap: f64,
    use_distilled: bool,
    trace_length: usize,
}

impl Actor {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: usize,
        cfg: &RunConfig,
        env: Box<dyn Environment>,
        arch: Arc<AgentArch>,
        register: &SnapshotRegister,
        seed: u64,
    ) -> Self {
        use rand::SeedableRng;
        let epsilon = actor_epsilon(cfg.eps_base, cfg.eps_power, id, cfg.actors);
        let feat_dim = arch.cfg.feat_dim();
        let obs_dim = env.observation_dim();
        let snapshot = register.latest();
        Actor {
            id,
            epsilon,
            shard: id % cfg.replay_shards.max(1),
            env,
            memory: EpisodicMemory::new(EpisodicConfig {
                k: cfg.intrinsic_k,
                c: cfg.intrinsic_c,
                kernel_eps: cfg.kernel_eps,
                xi: cfg.xi,
                s_max: cfg.s_max,
            }),
            assembler: WindowAssembler::new(cfg.trace_length, cfg.replay_period, obs_dim, feat_dim),
            rng: ChaCha8Rng::seed_from_u64(seed),
            all_keep: vec![DepthMask::all_keep(cfg.torso_blocks)],
            arch,
            snapshot,
            mixture: 0,
            state: Mat::zeros(1, cfg.core_hidden),
            obs: Vec::new(),
            prev: PrevStep::default(),
            return_ext: 0.0,
            needs_reset: true,
            rnd_scale: cfg.rnd_scale,
            l_cap: cfg.l_cap,
            use_distilled: cfg.distill,
            trace_length: cfg.trace_length,
        }
    }

    /// Runs one environment transition; `select_mixture` is consulted at
    /// episode starts. Returns a report when an episode finished.
    pub fn step(
        &mut self,
        register: &SnapshotRegister,
        replay: &ReplaySet,
        select_mixture: &mut dyn FnMut(&mut ChaCha8Rng) -> usize,
        intrinsic_on: bool,
    ) -> Option<EpisodeReport> {
        if self.needs_reset {
            self.snapshot = register.latest();
            self.mixture = select_mixture(&mut self.rng);
            self.memory.clear_episode();
            self.assembler.begin_episode();
            self.state = self.arch.zero_state(1);
            self.obs = self.env.reset();
            self.prev = PrevStep::default();
            self.return_ext = 0.0;
            self.needs_reset = false;
        }
        let a = self.arch.cfg.num_actions;

        // intrinsic quantities for the current observation, computed locally
        let (r_episodic, alpha, r_ngu, embedding) = if intrinsic_on {
            let embedding = self.snapshot.ap.embed_with(&self.snapshot.ap.params, &self.obs);
            let r_episodic = self.memory.reward(&embedding);
            let err = self.snapshot.rnd.error(&self.obs);
            let alpha = self.rnd_scale * lifelong_modulator(&self.snapshot.rnd.stats, err);
            let r_ngu = ngu_reward(r_episodic, alpha, self.l_cap);
            (r_episodic, alpha, r_ngu, embedding)
        } else {
            (0.0, 0.0, 0.0, vec![0.0; self.arch.cfg.ap_dim])
        };

        let feat = feature_vec(a, self.arch.cfg.ap_dim, &self.prev);
        let state_before = self.state.clone();
        let est = self.arch.forward_values(
            &self.snapshot.acting,
            &Mat::row(&self.obs),
            &Mat::row(&feat),
            &state_before,
            &self.all_keep,
            1,
            1,
        );
        let probs = &est.policy_probs.row_slice(0)[self.mixture * a..(self.mixture + 1) * a];
        let q = &est.q_comb.row_slice(0)[self.mixture * a..(self.mixture + 1) * a];
        let greedy = policy_action(probs, q, self.use_distilled);
        let explore = self.epsilon > 0.0 && self.rng.gen_bool(self.epsilon.min(1.0));
        let action = if explore {
            self.rng.gen_range(0..a)
        } else {
            greedy
        };
        let mu = self.epsilon / a as f64 + if action == greedy { 1.0 - self.epsilon } else { 0.0 };

        let out = self.env.step(action);
        self.return_ext += out.reward;

        let record = StepRecord {
            obs: std::mem::take(&mut self.obs),
            feat,
            action,
            behavior_prob: mu,
            reward_ext: out.reward,
            reward_ngu: r_ngu,
            done: out.done,
        };
        self.prev = PrevStep {
            action: Some(action),
            reward_ext: out.reward,
            reward_ngu: r_ngu,
            rnd_modulator: alpha,
            reward_episodic: r_episodic,
            ap_embedding: embedding,
        };
        let next_feat = feature_vec(a, self.arch.cfg.ap_dim, &self.prev);
        let sealed = self.assembler.push(record, &state_before, &out.observation, &next_feat, self.mixture);
        for seq in sealed {
            replay
                .insert(self.shard, seq, self.trace_length)
                .expect("actor-built sequences are valid");
        }
        self.state = est.final_state;
        self.obs = out.observation;

        if out.done {
            self.needs_reset = true;
            Some(EpisodeReport {
                mixture: self.mixture,
                return_ext: self.return_ext,
                frames: 0,
            })
        } else {
            None
        }
    }
}

/// Greedy whole-episode runner on the evaluation parameters.
pub struct Evaluator {
    env: Box<dyn Environment>,
    memory: EpisodicMemory,
    arch: Arc<AgentArch>,
    all_keep: Vec<DepthMask>,
    rnd_scale: f64,
    l_cap: f64,
    use_distilled: bool,
    intrinsic_on: bool,
}

impl Evaluator {
    pub fn new(cfg: &RunConfig, env: Box<dyn Environment>, arch: Arc<AgentArch>, intrinsic_on: bool) -> Self {
        Evaluator {
            env,
            memory: EpisodicMemory::new(EpisodicConfig {
                k: cfg.intrinsic_k,
                c: cfg.intrinsic_c,
                kernel_eps: cfg.kernel_eps,
                xi: cfg.xi,
                s_max: cfg.s_max,
            }),
            all_keep: vec![DepthMask::all_keep(cfg.torso_blocks)],
            arch,
            rnd_scale: cfg.rnd_scale,
            l_cap: cfg.l_cap,
            use_distilled: cfg.distill,
            intrinsic_on,
        }
    }

    /// Runs one full episode with greedy actions on `snapshot.eval` and the
    /// given (greedy-bandit) mixture; returns the extrinsic episode return.
    pub fn run_episode(&mut self, snapshot: &Snapshot, mixture: usize) -> (f64, u64) {
        let (ret, frames, _) = self.run_episode_recorded(snapshot, mixture);
        (ret, frames)
    }

    /// As [`run_episode`], also returning the greedy action sequence.
    pub fn run_episode_recorded(
        &mut self,
        snapshot: &Snapshot,
        mixture: usize,
    ) -> (f64, u64, Vec<usize>) {
        let a = self.arch.cfg.num_actions;
        self.memory.clear_episode();
        let mut state = self.arch.zero_state(1);
        let mut obs = self.env.reset();
        let mut prev = PrevStep::default();
        let mut total = 0.0;
        let mut frames = 0u64;
        let mut taken = Vec::new();
        loop {
            let (r_episodic, alpha, r_ngu, embedding) = if self.intrinsic_on {
                let embedding = snapshot.ap.embed_with(&snapshot.ap.params, &obs);
                let r_episodic = self.memory.reward(&embedding);
                let err = snapshot.rnd.error(&obs);
                let alpha = self.rnd_scale * lifelong_modulator(&snapshot.rnd.stats, err);
                let r_ngu = ngu_reward(r_episodic, alpha, self.l_cap);
                (r_episodic, alpha, r_ngu, embedding)
            } else {
                (0.0, 0.0, 0.0, vec![0.0; self.arch.cfg.ap_dim])
            };
            let feat = feature_vec(a, self.arch.cfg.ap_dim, &prev);
            let est = self.arch.forward_values(
                &snapshot.eval,
                &Mat::row(&obs),
                &Mat::row(&feat),
                &state,
                &self.all_keep,
                1,
                1,
            );
            let probs = &est.policy_probs.row_slice(0)[mixture * a..(mixture + 1) * a];
            let q = &est.q_comb.row_slice(0)[mixture * a..(mixture + 1) * a];
            let action = policy_action(probs, q, self.use_distilled);
            taken.push(action);
            let out = self.env.step(action);
            total += out.reward;
            frames += 1;
            prev = PrevStep {
                action: Some(action),
                reward_ext: out.reward,
                reward_ngu: r_ngu,
                rnd_modulator: alpha,
                reward_episodic: r_episodic,
                ap_embedding: embedding,
            };
            state = est.final_state;
            obs = out.observation;
            if out.done {
                return (total, frames, taken);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epsilon_ladder() {
        // single actor falls back to the base rate
        assert_eq!(actor_epsilon(0.4, 7.0, 0, 1), 0.4);
        let eps: Vec<f64> = (0..4).map(|l| actor_epsilon(0.4, 7.0, l, 4)).collect();
        assert!((eps[0] - 0.4).abs() < 1e-12);
        assert!((eps[3] - 0.4f64.powi(8)).abs() < 1e-12);
        for w in eps.windows(2) {
            assert!(w[1] < w[0]);
        }
    }
}
