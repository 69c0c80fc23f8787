//! The agent's function approximator: a weight-standardized residual MLP
//! torso over flat observations, a feature encoder for the non-image inputs,
//! a GRU core, and per-mixture dueling value heads plus a policy head.
//!
//! Heads emit `N * A` outputs laid out mixture-major (`col = j * A + a`).
//! Value heads operate in rescaled space; the combined action value is
//! `h(h⁻¹(Q_e) + β_j h⁻¹(Q_i))` (or the plain sum with rescaling off).
//! Stochastic depth drops whole residual branches with one mask per
//! trajectory, held fixed across its timesteps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Gru, Linear, ParamBuilder, ParamSet, ParamVars, WsLinear};
use super::mat::Mat;
use super::tape::{Tape, Var};

/// Width of the non-image feature encoder output.
const FEAT_WIDTH: usize = 32;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetConfig {
    pub obs_dim: usize,
    pub num_actions: usize,
    pub num_mixtures: usize,
    pub torso_width: usize,
    pub torso_blocks: usize,
    pub core_hidden: usize,
    pub head_width: usize,
    pub drop_rate: f64,
    /// One head estimating the combined value directly, instead of separate
    /// extrinsic/intrinsic dueling heads.
    pub single_head: bool,
    /// Compose the combined value through the invertible rescaling.
    pub rescale: bool,
    /// Dimension of the action-prediction embedding fed back as a feature.
    pub ap_dim: usize,
}

impl NetConfig {
    pub fn feat_dim(&self) -> usize {
        // one-hot previous action + (r_e, r_ngu, rnd modulator, episodic) + AP embedding
        self.num_actions + 4 + self.ap_dim
    }

    pub fn core_in_dim(&self) -> usize {
        self.torso_width + FEAT_WIDTH
    }

    pub fn head_in_dim(&self) -> usize {
        self.core_hidden + self.core_in_dim()
    }
}

/// Per-trajectory residual-block keep flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthMask {
    pub keep: Vec<bool>,
    pub drop_rate: f64,
}

impl DepthMask {
    /// Inference mask: every branch active, no scaling.
    pub fn all_keep(n_blocks: usize) -> Self {
        DepthMask {
            keep: vec![true; n_blocks],
            drop_rate: 0.0,
        }
    }

    /// Training mask: each block kept independently with probability
    /// `1 - drop_rate`; kept branches are scaled by `1/(1-drop_rate)` so the
    /// expected forward matches the all-keep network.
    pub fn sample<R: Rng>(rng: &mut R, drop_rate: f64, n_blocks: usize) -> Self {
        let keep = (0..n_blocks).map(|_| rng.gen_bool(1.0 - drop_rate)).collect();
        DepthMask { keep, drop_rate }
    }

    /// Multiplier applied to block `b`'s residual branch.
    pub fn scale(&self, b: usize) -> f64 {
        if !self.keep[b] {
            0.0
        } else if self.drop_rate > 0.0 {
            1.0 / (1.0 - self.drop_rate)
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ResBlock {
    l1: WsLinear,
    l2: WsLinear,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DuelingHead {
    l1: Linear,
    l2: Linear,
    value: Linear,
    advantage: Linear,
}

impl DuelingHead {
    fn build<R: Rng>(pb: &mut ParamBuilder<R>, name: &str, cfg: &NetConfig) -> Self {
        let hw = cfg.head_width;
        DuelingHead {
            l1: Linear::build(pb, &format!("{name}.l1"), cfg.head_in_dim(), hw),
            l2: Linear::build(pb, &format!("{name}.l2"), hw, hw),
            value: Linear::build(pb, &format!("{name}.v"), hw, cfg.num_mixtures),
            advantage: Linear::build(
                pb,
                &format!("{name}.a"),
                hw,
                cfg.num_mixtures * cfg.num_actions,
            ),
        }
    }

    /// Q[j, a] = V[j] + A[j, a] - mean_a A[j, .], per mixture.
    fn forward(&self, tape: &mut Tape, pv: &ParamVars, x: Var, actions: usize) -> Var {
        let h = self.l1.forward(tape, pv, x);
        let h = tape.relu(h);
        let h = self.l2.forward(tape, pv, h);
        let h = tape.relu(h);
        let v = self.value.forward(tape, pv, h);
        let a = self.advantage.forward(tape, pv, h);
        let a_mean = tape.group_col_mean(a, actions);
        let centered_base = tape.sub(v, a_mean);
        let broad = tape.repeat_cols(centered_base, actions);
        tape.add(broad, a)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PolicyHead {
    l1: Linear,
    l2: Linear,
    out: Linear,
}

impl PolicyHead {
    fn build<R: Rng>(pb: &mut ParamBuilder<R>, cfg: &NetConfig) -> Self {
        let hw = cfg.head_width;
        PolicyHead {
            l1: Linear::build(pb, "pi.l1", cfg.head_in_dim(), hw),
            l2: Linear::build(pb, "pi.l2", hw, hw),
            out: Linear::build(pb, "pi.out", hw, cfg.num_mixtures * cfg.num_actions),
        }
    }

    fn forward(&self, tape: &mut Tape, pv: &ParamVars, x: Var) -> Var {
        let h = self.l1.forward(tape, pv, x);
        let h = tape.relu(h);
        let h = self.l2.forward(tape, pv, h);
        let h = tape.relu(h);
        self.out.forward(tape, pv, h)
    }
}

/// Architecture description; parameter values live in [`ParamSet`]s that all
/// share the layout this arch registered.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentArch {
    pub cfg: NetConfig,
    torso_in: WsLinear,
    blocks: Vec<ResBlock>,
    feat_enc: Linear,
    core: Gru,
    head_e: DuelingHead,
    head_i: Option<DuelingHead>,
    policy: PolicyHead,
    /// β_j repeated per action, `[1, N*A]`, used by the combined-Q composition.
    betas_row: Vec<f64>,
}

/// Tape-level outputs of one unroll, rows laid out time-major (`t * batch + b`).
pub struct NetOutputs {
    pub q_e: Var,
    pub q_i: Option<Var>,
    pub q_comb: Var,
    pub policy_logits: Var,
    pub policy_probs: Var,
    /// GRU state after the last step, `[batch, hidden]`.
    pub final_state: Mat,
}

/// Value-level snapshot of the per-timestep estimates for one parameter set.
#[derive(Debug, Clone)]
pub struct QEstimate {
    pub q_e: Mat,
    pub q_i: Option<Mat>,
    pub q_comb: Mat,
    pub policy_logits: Mat,
    pub policy_probs: Mat,
    pub final_state: Mat,
}

impl AgentArch {
    pub fn build<R: Rng>(cfg: NetConfig, betas: &[f64], rng: &mut R) -> (Self, ParamSet) {
        assert_eq!(betas.len(), cfg.num_mixtures);
        let mut pb = ParamBuilder::new(rng);
        let torso_in = WsLinear::build(&mut pb, "torso.in", cfg.obs_dim, cfg.torso_width);
        let blocks = (0..cfg.torso_blocks)
            .map(|i| ResBlock {
                l1: WsLinear::build(&mut pb, &format!("torso.b{i}.l1"), cfg.torso_width, cfg.torso_width),
                l2: WsLinear::build(&mut pb, &format!("torso.b{i}.l2"), cfg.torso_width, cfg.torso_width),
            })
            .collect();
        let feat_enc = Linear::build(&mut pb, "feat", cfg.feat_dim(), FEAT_WIDTH);
        let core = Gru::build(&mut pb, "core", cfg.core_in_dim(), cfg.core_hidden);
        let head_e = DuelingHead::build(&mut pb, "qe", &cfg);
        let head_i = if cfg.single_head {
            None
        } else {
            Some(DuelingHead::build(&mut pb, "qi", &cfg))
        };
        let policy = PolicyHead::build(&mut pb, &cfg);
        let betas_row = betas
            .iter()
            .flat_map(|&b| std::iter::repeat(b).take(cfg.num_actions))
            .collect();
        (
            AgentArch {
                cfg,
                torso_in,
                blocks,
                feat_enc,
                core,
                head_e,
                head_i,
                policy,
                betas_row,
            },
            pb.set,
        )
    }

    /// Unrolls the network over `steps` timesteps of `batch` sequences.
    ///
    /// `obs` and `feats` are `[batch * steps, .]` with rows time-major.
    /// `depth_masks` has one entry per sequence and is applied identically at
    /// every timestep of that sequence. Row multipliers for dropped branches
    /// are exact zeros, so a dropped branch is bypassed outright.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        obs: &Mat,
        feats: &Mat,
        initial_state: &Mat,
        depth_masks: &[DepthMask],
        batch: usize,
        steps: usize,
    ) -> NetOutputs {
        let cfg = &self.cfg;
        assert_eq!(obs.rows, batch * steps, "obs rows");
        assert_eq!(obs.cols, cfg.obs_dim, "obs dim");
        assert_eq!(feats.rows, batch * steps, "feat rows");
        assert_eq!(feats.cols, cfg.feat_dim(), "feat dim");
        assert_eq!(initial_state.shape(), (batch, cfg.core_hidden), "state shape");
        assert_eq!(depth_masks.len(), batch, "one depth mask per sequence");

        let obs_v = tape.constant(obs.clone());
        let feats_v = tape.constant(feats.clone());

        // Torso with temporally-consistent stochastic depth.
        let mut x = self.torso_in.forward(tape, pv, obs_v);
        x = tape.relu(x);
        for (bi, block) in self.blocks.iter().enumerate() {
            let branch = block.l1.forward(tape, pv, x);
            let branch = tape.relu(branch);
            let branch = block.l2.forward(tape, pv, branch);
            let branch = tape.relu(branch);
            let row_mults: Vec<f64> = (0..batch * steps)
                .map(|r| depth_masks[r % batch].scale(bi))
                .collect();
            let scaled = tape.row_scale(branch, row_mults);
            x = tape.add(x, scaled);
        }

        let f = self.feat_enc.forward(tape, pv, feats_v);
        let f = tape.relu(f);
        let core_in = tape.concat_cols(x, f);

        // Recurrent core, stored-state strategy: no gradient into h0.
        let mut h = tape.constant(initial_state.clone());
        let mut outs = Vec::with_capacity(steps);
        for t in 0..steps {
            let x_t = tape.slice_rows(core_in, t * batch, (t + 1) * batch);
            h = self.core.step(tape, pv, x_t, h);
            outs.push(h);
        }
        let core_out = tape.concat_rows(&outs);
        let final_state = tape.value(h).clone();

        let head_in = tape.concat_cols(core_out, core_in);

        let q_e = self.head_e.forward(tape, pv, head_in, cfg.num_actions);
        let (q_i, q_comb) = match &self.head_i {
            None => (None, q_e),
            Some(head_i) => {
                let q_i = head_i.forward(tape, pv, head_in, cfg.num_actions);
                let beta = Mat {
                    rows: 1,
                    cols: self.betas_row.len(),
                    data: self.betas_row.clone(),
                };
                let beta_v = tape.constant(beta);
                let comb = if cfg.rescale {
                    let ue = tape.unrescale(q_e);
                    let ui = tape.unrescale(q_i);
                    let bi = tape.mul_row(ui, beta_v);
                    let sum = tape.add(ue, bi);
                    tape.rescale(sum)
                } else {
                    let bi = tape.mul_row(q_i, beta_v);
                    tape.add(q_e, bi)
                };
                (Some(q_i), comb)
            }
        };

        let policy_logits = self.policy.forward(tape, pv, head_in);
        let policy_probs = tape.group_softmax(policy_logits, cfg.num_actions);

        NetOutputs {
            q_e,
            q_i,
            q_comb,
            policy_logits,
            policy_probs,
            final_state,
        }
    }

    /// Values-only unroll (actors, evaluators, target network).
    #[allow(clippy::too_many_arguments)]
    pub fn forward_values(
        &self,
        params: &ParamSet,
        obs: &Mat,
        feats: &Mat,
        initial_state: &Mat,
        depth_masks: &[DepthMask],
        batch: usize,
        steps: usize,
    ) -> QEstimate {
        let mut tape = Tape::new();
        let pv = ParamVars::load(&mut tape, params, false);
        let out = self.forward(&mut tape, &pv, obs, feats, initial_state, depth_masks, batch, steps);
        QEstimate {
            q_e: tape.value(out.q_e).clone(),
            q_i: out.q_i.map(|v| tape.value(v).clone()),
            q_comb: tape.value(out.q_comb).clone(),
            policy_logits: tape.value(out.policy_logits).clone(),
            policy_probs: tape.value(out.policy_probs).clone(),
            final_state: out.final_state,
        }
    }

    pub fn zero_state(&self, batch: usize) -> Mat {
        Mat::zeros(batch, self.cfg.core_hidden)
    }
}

/// The three parameter sets sharing one architecture.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentNetwork {
    pub arch: AgentArch,
    pub online: ParamSet,
    pub target: ParamSet,
    pub eval: ParamSet,
}

impl AgentNetwork {
    pub fn new<R: Rng>(cfg: NetConfig, betas: &[f64], rng: &mut R) -> Self {
        let (arch, online) = AgentArch::build(cfg, betas, rng);
        let target = online.clone();
        let eval = online.clone();
        AgentNetwork {
            arch,
            online,
            target,
            eval,
        }
    }

    /// Hard copy of the online parameters into the target set whenever the
    /// step counter crosses the period. Returns whether a sync happened.
    pub fn maybe_sync_target(&mut self, learner_step: u64, period: u64) -> bool {
        if period == 0 || learner_step % period == 0 {
            self.target.copy_from(&self.online);
            true
        } else {
            false
        }
    }

    pub fn ema_update(&mut self, decay: f64) {
        // The borrow checker needs the split.
        let online = self.online.clone();
        self.eval.ema_from(&online, decay);
    }
}

/// Assembles the non-image feature vector fed alongside each observation.
#[derive(Debug, Clone, Default)]
pub struct PrevStep {
    pub action: Option<usize>,
    pub reward_ext: f64,
    pub reward_ngu: f64,
    pub rnd_modulator: f64,
    pub reward_episodic: f64,
    pub ap_embedding: Vec<f64>,
}

pub fn feature_vec(num_actions: usize, ap_dim: usize, prev: &PrevStep) -> Vec<f64> {
    let mut out = vec![0.0; num_actions + 4 + ap_dim];
    if let Some(a) = prev.action {
        out[a] = 1.0;
    }
    out[num_actions] = prev.reward_ext;
    out[num_actions + 1] = prev.reward_ngu;
    out[num_actions + 2] = prev.rnd_modulator;
    out[num_actions + 3] = prev.reward_episodic;
    if !prev.ap_embedding.is_empty() {
        debug_assert_eq!(prev.ap_embedding.len(), ap_dim);
        out[num_actions + 4..].copy_from_slice(&prev.ap_embedding);
    }
    out
}
