//! Learner: unrolls online and target networks over a replayed batch,
//! computes per-mixture Q(λ) returns (bootstrapping from the online network
//! by default), applies trust-region masking and TD normalization, and
//! takes one optimization step each for the agent network, the
//! action-prediction embedder and the RND predictor.
//!
//! All target quantities (returns, divisors, masks, distillation targets)
//! are computed once per batch and then treated as constants around the
//! differentiable graph -- that is the objective the optimizer sees, and the
//! gradient checks in the test suite differentiate exactly this function.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::family::MixtureFamily;
use crate::intrinsic::{ApEmbedder, RndPair};
use crate::learning::{
    self, LossMode, RunningStats, DISTILL_EPSILON,
};
use crate::nn::adam::{Adam, AdamConfig};
use crate::nn::agent::{AgentNetwork, DepthMask, NetConfig, NetOutputs, QEstimate};
use crate::nn::layers::{ParamSet, ParamVars};
use crate::nn::mat::Mat;
use crate::nn::tape::{Tape, Var};
use crate::replay::SampleBatch;
use crate::returns::{
    general_qlambda_with, rescale, unrescale, BootstrapPolicy, LambdaPolicy, TraceInputs,
};

use super::RunError;

/// EMA decay of the evaluation parameter set.
pub const EVAL_PARAM_DECAY: f64 = 0.995;

/// Everything about one batch that is frozen before differentiation.
pub struct FrozenPlan {
    pub batch_size: usize,
    pub t_eff: usize,
    pub obs: Mat,
    pub feats: Mat,
    pub h0: Mat,
    pub depth_masks: Vec<DepthMask>,
    /// Per mixture: per-row column index of the taken action (`j*A + a_t`).
    action_cols: Vec<Vec<usize>>,
    /// Per mixture: per-row transformed-space value targets.
    value_targets: Vec<Vec<f64>>,
    /// Per mixture: per-row folded loss coefficients
    /// `0.5 w_IS keep eq5_j / (σ_j² M)`; zero on padding and bootstrap rows.
    value_coeff: Vec<Vec<f64>>,
    // decomposed-mode targets/coefficients (empty in other modes)
    dec_targets_ext: Vec<Vec<f64>>,
    dec_targets_int: Vec<Vec<f64>>,
    dec_coeff_ext: Vec<Vec<f64>>,
    dec_coeff_int: Vec<Vec<f64>>,
    /// `[rows, N*A]` distillation coefficients (`-target w keep eq5 / M`).
    distill_coeff: Option<Mat>,
    ap_obs_t: Mat,
    ap_obs_t1: Mat,
    ap_actions: Vec<usize>,
    rnd_obs: Mat,
    /// Per-sequence replay priorities from the behavior mixture's errors.
    pub priorities: Vec<f64>,
    pub mean_lambda: f64,
    pub masked_frac: f64,
    pub sigmas: Vec<f64>,
}

impl FrozenPlan {
    /// Overwrites the value targets of every cell whose loss coefficient is
    /// zero (masked, padded or bootstrap rows); used to demonstrate that
    /// masked timesteps cannot influence the loss.
    pub fn corrupt_masked_value_targets(&mut self, value: f64) {
        for (targets, coeffs) in self
            .value_targets
            .iter_mut()
            .zip(&self.value_coeff)
            .chain(self.dec_targets_ext.iter_mut().zip(&self.dec_coeff_ext))
            .chain(self.dec_targets_int.iter_mut().zip(&self.dec_coeff_int))
        {
            for (t, &c) in targets.iter_mut().zip(coeffs) {
                if c == 0.0 {
                    *t = value;
                }
            }
        }
    }

    /// Number of (row, mixture) cells with a live distillation target.
    pub fn distill_rows_kept(&self) -> usize {
        let Some(coeff) = &self.distill_coeff else {
            return 0;
        };
        let n_mix = self.value_targets.len();
        let a = coeff.cols / n_mix;
        let mut kept = 0;
        for row in 0..coeff.rows {
            for j in 0..n_mix {
                if (0..a).any(|ai| coeff.at(row, j * a + ai) != 0.0) {
                    kept += 1;
                }
            }
        }
        kept
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts {
    pub value: f64,
    pub distill: f64,
    pub ap: f64,
    pub rnd: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.value + self.distill + self.ap + self.rnd
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub priorities: Vec<f64>,
    pub losses: LossParts,
    pub mean_lambda: f64,
    pub masked_frac: f64,
    pub sigmas: Vec<f64>,
}

pub struct Learner {
    pub cfg: RunConfig,
    pub family: MixtureFamily,
    pub net: AgentNetwork,
    pub rnd: RndPair,
    pub ap: ApEmbedder,
    pub stats: RunningStats,
    opt_rl: Adam,
    opt_ap: Adam,
    opt_rnd: Adam,
    pub steps: u64,
    rng: ChaCha8Rng,
    mode: LossMode,
    obs_dim: usize,
    num_actions: usize,
}

impl Learner {
    pub fn new(
        cfg: &RunConfig,
        family: MixtureFamily,
        obs_dim: usize,
        num_actions: usize,
        seed: u64,
    ) -> Result<Self, RunError> {
        let mode: LossMode = cfg
            .loss_mode
            .parse()
            .map_err(|e: learning::LearningError| RunError::Setup(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net_cfg = NetConfig {
            obs_dim,
            num_actions,
            num_mixtures: family.n,
            torso_width: cfg.torso_width,
            torso_blocks: cfg.torso_blocks,
            core_hidden: cfg.core_hidden,
            head_width: cfg.head_width,
            drop_rate: cfg.drop_rate,
            single_head: mode == LossMode::SingleHead,
            rescale: cfg.rescale,
            ap_dim: cfg.ap_dim,
        };
        let net = AgentNetwork::new(net_cfg, &family.betas, &mut rng);
        let rnd = RndPair::new(obs_dim, cfg.intrinsic_hidden, cfg.rnd_dim, &mut rng);
        let ap = ApEmbedder::new(obs_dim, cfg.intrinsic_hidden, cfg.ap_dim, num_actions, &mut rng);
        let opt_rl = Adam::new(
            AdamConfig {
                lr: cfg.lr,
                weight_decay: cfg.wd,
                beta1: cfg.adam_beta1,
                beta2: cfg.adam_beta2,
                eps: cfg.adam_eps,
            },
            &net.online,
        );
        let opt_ap = Adam::new(
            AdamConfig {
                lr: cfg.ap_lr,
                weight_decay: cfg.ap_wd,
                beta1: cfg.adam_beta1,
                beta2: cfg.adam_beta2,
                eps: cfg.adam_eps,
            },
            &ap.params,
        );
        let opt_rnd = Adam::new(
            AdamConfig {
                lr: cfg.rnd_lr,
                weight_decay: cfg.rnd_wd,
                beta1: cfg.adam_beta1,
                beta2: cfg.adam_beta2,
                eps: cfg.adam_eps,
            },
            &rnd.predictor_params,
        );
        let stats = RunningStats::new(family.n, cfg.norm_decay);
        Ok(Learner {
            cfg: cfg.clone(),
            family,
            net,
            rnd,
            ap,
            stats,
            opt_rl,
            opt_ap,
            opt_rnd,
            steps: 0,
            rng,
            mode,
            obs_dim,
            num_actions,
        })
    }

    pub fn lambda_policy(&self) -> LambdaPolicy {
        match self.cfg.estimator.as_str() {
            "watkins" => LambdaPolicy::Watkins { lambda: self.cfg.lambda },
            "pengs" => LambdaPolicy::Pengs { lambda: self.cfg.lambda },
            "retrace" => LambdaPolicy::Retrace { lambda: self.cfg.lambda },
            _ => LambdaPolicy::SoftWatkins {
                lambda: self.cfg.lambda,
                kappa: self.cfg.kappa,
            },
        }
    }

    pub fn bootstrap_policy(&self) -> BootstrapPolicy {
        match self.cfg.estimator.as_str() {
            "watkins" | "pengs" => BootstrapPolicy::MaxQ,
            _ => BootstrapPolicy::ExpectedPolicy,
        }
    }

    /// Builds the frozen plan for a batch: unrolls online and target
    /// parameters (values only), computes returns, updates the running TD
    /// statistics, and freezes targets, masks and coefficients.
    pub fn prepare(&mut self, batch: &SampleBatch) -> Result<FrozenPlan, RunError> {
        let b = batch.sequences.len();
        let n = self.family.n;
        let a = self.num_actions;
        let feat_dim = self.net.arch.cfg.feat_dim();

        let valids: Vec<usize> = batch.sequences.iter().map(|s| s.valid_len).collect();
        let terminals: Vec<bool> = batch.sequences.iter().map(|s| s.is_terminal()).collect();
        let t_eff = (0..b)
            .map(|i| valids[i] + usize::from(!terminals[i]))
            .max()
            .unwrap_or(1);

        let rows = b * t_eff;
        let mut obs = Mat::zeros(rows, self.obs_dim);
        let mut feats = Mat::zeros(rows, feat_dim);
        let mut h0 = Mat::zeros(b, self.net.arch.cfg.core_hidden);
        for (bi, seq) in batch.sequences.iter().enumerate() {
            h0.data[bi * h0.cols..(bi + 1) * h0.cols].copy_from_slice(&seq.initial_state.data);
            for t in 0..t_eff {
                let row = t * b + bi;
                let (o, f): (&[f64], &[f64]) = if t < valids[bi] {
                    (&seq.steps[t].obs, &seq.steps[t].feat)
                } else if t == valids[bi] && !terminals[bi] {
                    match &seq.bootstrap {
                        Some(bs) => (&bs.obs, &bs.feat),
                        None => {
                            return Err(RunError::Setup(
                                "non-terminal sequence lacks bootstrap observation".into(),
                            ))
                        }
                    }
                } else {
                    continue; // zero padding
                };
                obs.data[row * self.obs_dim..(row + 1) * self.obs_dim].copy_from_slice(o);
                feats.data[row * feat_dim..(row + 1) * feat_dim].copy_from_slice(f);
            }
        }

        let depth_masks: Vec<DepthMask> = (0..b)
            .map(|_| DepthMask::sample(&mut self.rng, self.cfg.drop_rate, self.cfg.torso_blocks))
            .collect();

        let view_on = self.net.arch.forward_values(
            &self.net.online,
            &obs,
            &feats,
            &h0,
            &depth_masks,
            b,
            t_eff,
        );
        let view_tg = self.net.arch.forward_values(
            &self.net.target,
            &obs,
            &feats,
            &h0,
            &depth_masks,
            b,
            t_eff,
        );
        self.plan_from_views(batch, obs, feats, h0, depth_masks, t_eff, &view_on, &view_tg, a, n)
    }

    /// Target policy for mixture `j` at `row`: the sharpened distilled
    /// policy, or the ε-greedy distribution over Q when distillation is off.
    fn target_policy_row(&self, view: &QEstimate, row: usize, j: usize) -> Vec<f64> {
        let a = self.num_actions;
        if self.cfg.distill {
            let probs = &view.policy_probs.row_slice(row)[j * a..(j + 1) * a];
            learning::sharpen_policy(probs, self.cfg.tau)
        } else {
            let q = &view.q_comb.row_slice(row)[j * a..(j + 1) * a];
            learning::epsilon_greedy_target(q, DISTILL_EPSILON)
        }
    }

    fn transform(&self, v: f64) -> f64 {
        if self.cfg.rescale {
            rescale(v)
        } else {
            v
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn plan_from_views(
        &mut self,
        batch: &SampleBatch,
        obs: Mat,
        feats: Mat,
        h0: Mat,
        depth_masks: Vec<DepthMask>,
        t_eff: usize,
        view_on: &QEstimate,
        view_tg: &QEstimate,
        a: usize,
        n: usize,
    ) -> Result<FrozenPlan, RunError> {
        let b = batch.sequences.len();
        let rows = b * t_eff;
        let valids: Vec<usize> = batch.sequences.iter().map(|s| s.valid_len).collect();
        let terminals: Vec<bool> = batch.sequences.iter().map(|s| s.is_terminal()).collect();
        let total_valid: usize = valids.iter().sum();
        let m_norm = total_valid.max(1) as f64;
        let policy = self.lambda_policy();
        let bootstrap = self.bootstrap_policy();
        // Bootstrap values come from the online network by default; the
        // ablation reverts to the target network (values and target policy).
        let boot_view: &QEstimate = if self.cfg.bootstrap == "target" {
            view_tg
        } else {
            view_on
        };

        // untransformed combined Q per (row, col) from the bootstrap source
        let rescale_on = self.cfg.rescale;
        let ut = move |v: f64| if rescale_on { unrescale(v) } else { v };
        let uq = move |view: &QEstimate, row: usize, col: usize| -> f64 {
            ut(view.q_comb.at(row, col))
        };

        // returns, errors and λ diagnostics per (sequence, mixture)
        let mut g_transformed = vec![vec![Vec::new(); n]; b];
        let mut errors = vec![vec![Vec::new(); n]; b];
        let mut lambda_sum = 0.0;
        let mut lambda_count = 0usize;
        for (bi, seq) in batch.sequences.iter().enumerate() {
            let l = valids[bi];
            for j in 0..n {
                let beta = self.family.betas[j];
                let gamma = self.family.gammas[j];
                let mut q = Vec::with_capacity(l * a);
                let mut pi = Vec::with_capacity(l * a);
                for t in 0..l {
                    let row = t * b + bi;
                    for ai in 0..a {
                        q.push(uq(boot_view, row, j * a + ai));
                    }
                    pi.extend(self.target_policy_row(boot_view, row, j));
                }
                let (bootstrap_q, bootstrap_policy) = if terminals[bi] {
                    (None, None)
                } else {
                    let row = l * b + bi;
                    let qrow: Vec<f64> = (0..a).map(|ai| uq(boot_view, row, j * a + ai)).collect();
                    let pirow = self.target_policy_row(boot_view, row, j);
                    (Some(qrow), Some(pirow))
                };
                let inputs = TraceInputs {
                    actions_per_state: a,
                    rewards: seq.steps[..l]
                        .iter()
                        .map(|s| s.reward_ext + beta * s.reward_ngu)
                        .collect(),
                    discounts: vec![gamma; l],
                    actions: seq.steps[..l].iter().map(|s| s.action).collect(),
                    behavior_probs: seq.steps[..l].iter().map(|s| s.behavior_prob).collect(),
                    target_policy: pi,
                    q,
                    dones: seq.steps[..l].iter().map(|s| s.done).collect(),
                    bootstrap_q,
                    bootstrap_policy,
                };
                inputs.validate().map_err(|e| RunError::Setup(e.to_string()))?;
                let lambdas = policy.coefficients(&inputs);
                let est = general_qlambda_with(&inputs, &lambdas, bootstrap)
                    .map_err(|e| RunError::Setup(e.to_string()))?;
                lambda_sum += lambdas.iter().sum::<f64>();
                lambda_count += lambdas.len();
                let gt: Vec<f64> = est.g.iter().map(|&g| self.transform(g)).collect();
                let errs: Vec<f64> = (0..l)
                    .map(|t| {
                        let row = t * b + bi;
                        view_on.q_comb.at(row, j * a + seq.steps[t].action) - gt[t]
                    })
                    .collect();
                g_transformed[bi][j] = gt;
                errors[bi][j] = errs;
            }
        }

        // per-mixture running stats (IS-weighted), σ and normalized errors
        let mut sigmas = vec![1.0; n];
        let mut normalized: Vec<Vec<f64>> = vec![Vec::new(); n]; // flat, bi-major
        for j in 0..n {
            let mut flat = Vec::with_capacity(total_valid);
            let mut w = Vec::with_capacity(total_valid);
            for bi in 0..b {
                flat.extend_from_slice(&errors[bi][j]);
                w.extend(std::iter::repeat(batch.weights[bi]).take(errors[bi][j].len()));
            }
            self.stats.update(j, &flat, &w);
            let norm = learning::normalize_td(&flat, self.stats.running_std(j));
            sigmas[j] = norm.sigma;
            normalized[j] = norm.errors;
        }

        // trust-region masks per (sequence, mixture, timestep)
        let mut keep = vec![vec![Vec::new(); n]; b];
        let mut masked = 0usize;
        for (bi, seq) in batch.sequences.iter().enumerate() {
            let l = valids[bi];
            for j in 0..n {
                let q_on: Vec<f64> = (0..l)
                    .map(|t| view_on.q_comb.at(t * b + bi, j * a + seq.steps[t].action))
                    .collect();
                let q_tg: Vec<f64> = (0..l)
                    .map(|t| view_tg.q_comb.at(t * b + bi, j * a + seq.steps[t].action))
                    .collect();
                let verdict = if self.cfg.trust_region {
                    learning::trust_region_mask(
                        &q_on,
                        &q_tg,
                        &g_transformed[bi][j],
                        sigmas[j],
                        self.cfg.alpha_trust,
                    )
                } else {
                    learning::TrustRegionVerdict { keep: vec![true; l] }
                };
                masked += verdict.keep.iter().filter(|&&k| !k).count();
                keep[bi][j] = verdict.keep;
            }
        }
        let masked_frac = if total_valid * n == 0 {
            0.0
        } else {
            masked as f64 / (total_valid * n) as f64
        };

        // folded value-loss coefficients and targets
        let mut action_cols = vec![vec![0usize; rows]; n];
        let mut value_targets = vec![vec![0.0; rows]; n];
        let mut value_coeff = vec![vec![0.0; rows]; n];
        for (bi, seq) in batch.sequences.iter().enumerate() {
            let eq5 = learning::cross_mixture_weights(self.cfg.eta, n, seq.mixture);
            for j in 0..n {
                let sigma_sq = if self.cfg.normalize {
                    sigmas[j] * sigmas[j]
                } else {
                    1.0
                };
                for t in 0..valids[bi] {
                    let row = t * b + bi;
                    action_cols[j][row] = j * a + seq.steps[t].action;
                    value_targets[j][row] = g_transformed[bi][j][t];
                    let k = if keep[bi][j][t] { 1.0 } else { 0.0 };
                    value_coeff[j][row] =
                        0.5 * eq5[j] * batch.weights[bi] * k / (sigma_sq * m_norm);
                }
            }
        }

        // decomposed-mode component returns and coefficients
        let (mut dec_targets_ext, mut dec_targets_int) = (Vec::new(), Vec::new());
        let (mut dec_coeff_ext, mut dec_coeff_int) = (Vec::new(), Vec::new());
        if self.mode == LossMode::Decomposed {
            dec_targets_ext = vec![vec![0.0; rows]; n];
            dec_targets_int = vec![vec![0.0; rows]; n];
            dec_coeff_ext = vec![vec![0.0; rows]; n];
            dec_coeff_int = vec![vec![0.0; rows]; n];
            let q_i_on = view_on.q_i.as_ref().ok_or_else(|| {
                RunError::Setup("decomposed loss requires an intrinsic head".into())
            })?;
            let boot_qe = |row: usize, col: usize| ut(boot_view.q_e.at(row, col));
            let boot_qi =
                |row: usize, col: usize| ut(boot_view.q_i.as_ref().expect("intrinsic head").at(row, col));
            for (bi, seq) in batch.sequences.iter().enumerate() {
                let l = valids[bi];
                let eq5 = learning::cross_mixture_weights(self.cfg.eta, n, seq.mixture);
                for j in 0..n {
                    let gamma = self.family.gammas[j];
                    let beta = self.family.betas[j];
                    // reuse the combined-Q trace coefficients and policies
                    let mut pi = Vec::with_capacity(l * a);
                    for t in 0..l {
                        pi.extend(self.target_policy_row(boot_view, t * b + bi, j));
                    }
                    let lambda_src = {
                        let mut q = Vec::with_capacity(l * a);
                        for t in 0..l {
                            for ai in 0..a {
                                q.push(uq(boot_view, t * b + bi, j * a + ai));
                            }
                        }
                        q
                    };
                    let mk_inputs = |q: Vec<f64>,
                                     rewards: Vec<f64>,
                                     bq: Option<Vec<f64>>,
                                     bpi: Option<Vec<f64>>| TraceInputs {
                        actions_per_state: a,
                        rewards,
                        discounts: vec![gamma; l],
                        actions: seq.steps[..l].iter().map(|s| s.action).collect(),
                        behavior_probs: seq.steps[..l].iter().map(|s| s.behavior_prob).collect(),
                        target_policy: pi.clone(),
                        q,
                        dones: seq.steps[..l].iter().map(|s| s.done).collect(),
                        bootstrap_q: bq,
                        bootstrap_policy: bpi,
                    };
                    let comb_inputs = mk_inputs(
                        lambda_src.clone(),
                        seq.steps[..l]
                            .iter()
                            .map(|s| s.reward_ext + beta * s.reward_ngu)
                            .collect(),
                        None,
                        None,
                    );
                    // λ from the combined inputs (dones/bootstrap unused here)
                    let lambdas = policy.coefficients(&comb_inputs);
                    let boot_row = l * b + bi;
                    let (bqe, bqi, bpi) = if terminals[bi] {
                        (None, None, None)
                    } else {
                        (
                            Some((0..a).map(|ai| boot_qe(boot_row, j * a + ai)).collect()),
                            Some((0..a).map(|ai| boot_qi(boot_row, j * a + ai)).collect()),
                            Some(self.target_policy_row(boot_view, boot_row, j)),
                        )
                    };
                    let qe: Vec<f64> = (0..l)
                        .flat_map(|t| {
                            (0..a).map(move |ai| (t, ai))
                        })
                        .map(|(t, ai)| boot_qe(t * b + bi, j * a + ai))
                        .collect();
                    let qi: Vec<f64> = (0..l)
                        .flat_map(|t| (0..a).map(move |ai| (t, ai)))
                        .map(|(t, ai)| boot_qi(t * b + bi, j * a + ai))
                        .collect();
                    let inputs_e = mk_inputs(
                        qe,
                        seq.steps[..l].iter().map(|s| s.reward_ext).collect(),
                        bqe,
                        bpi.clone(),
                    );
                    let inputs_i = mk_inputs(
                        qi,
                        seq.steps[..l].iter().map(|s| s.reward_ngu).collect(),
                        bqi,
                        bpi,
                    );
                    let ge = general_qlambda_with(&inputs_e, &lambdas, bootstrap)
                        .map_err(|e| RunError::Setup(e.to_string()))?;
                    let gi = general_qlambda_with(&inputs_i, &lambdas, bootstrap)
                        .map_err(|e| RunError::Setup(e.to_string()))?;
                    let sigma_sq = if self.cfg.normalize {
                        sigmas[j] * sigmas[j]
                    } else {
                        1.0
                    };
                    for t in 0..l {
                        let row = t * b + bi;
                        dec_targets_ext[j][row] = self.transform(ge.g[t]);
                        dec_targets_int[j][row] = self.transform(gi.g[t]);
                        let k = if keep[bi][j][t] { 1.0 } else { 0.0 };
                        let base = 0.5 * eq5[j] * batch.weights[bi] * k / (sigma_sq * m_norm);
                        dec_coeff_ext[j][row] = base;
                        dec_coeff_int[j][row] = base * beta * beta;
                    }
                }
            }
            let _ = q_i_on;
        }

        // distillation coefficients
        let distill_coeff = if self.cfg.distill {
            let mut d = Mat::zeros(rows, n * a);
            for (bi, seq) in batch.sequences.iter().enumerate() {
                let eq5 = learning::cross_mixture_weights(self.cfg.eta, n, seq.mixture);
                for t in 0..valids[bi] {
                    let row = t * b + bi;
                    for j in 0..n {
                        let p_tg = &view_tg.policy_probs.row_slice(row)[j * a..(j + 1) * a];
                        let p_on = &view_on.policy_probs.row_slice(row)[j * a..(j + 1) * a];
                        if learning::kl_divergence(p_tg, p_on) > self.cfg.c_kl {
                            continue;
                        }
                        let q = &view_on.q_comb.row_slice(row)[j * a..(j + 1) * a];
                        let target = learning::epsilon_greedy_target(q, DISTILL_EPSILON);
                        for ai in 0..a {
                            d.data[row * n * a + j * a + ai] =
                                -target[ai] * eq5[j] * batch.weights[bi] / m_norm;
                        }
                    }
                }
            }
            Some(d)
        } else {
            None
        };

        // action-prediction pairs and RND observations over valid steps
        let mut ap_t = Vec::new();
        let mut ap_t1 = Vec::new();
        let mut ap_actions = Vec::new();
        let mut rnd_rows = Vec::new();
        for (bi, seq) in batch.sequences.iter().enumerate() {
            for t in 0..valids[bi] {
                rnd_rows.push(seq.steps[t].obs.clone());
                let next: Option<&[f64]> = if t + 1 < valids[bi] {
                    Some(&seq.steps[t + 1].obs)
                } else if !terminals[bi] {
                    seq.bootstrap.as_ref().map(|bs| bs.obs.as_slice())
                } else {
                    None
                };
                if let Some(next) = next {
                    ap_t.push(seq.steps[t].obs.clone());
                    ap_t1.push(next.to_vec());
                    ap_actions.push(seq.steps[t].action);
                }
            }
        }

        // RND statistics absorb the current batch before the predictor step
        let rnd_obs = Mat::from_rows(&rnd_rows);
        let batch_errors = self.rnd.errors_batch(&rnd_obs);
        self.rnd.stats.update_batch(&batch_errors);

        // priorities from the behavior mixture's normalized errors
        let mut priorities = Vec::with_capacity(b);
        for bi in 0..b {
            let j = batch.sequences[bi].mixture;
            let offset: usize = valids[..bi].iter().sum();
            let slice = &normalized[j][offset..offset + valids[bi]];
            let raw: Vec<f64>;
            let errs: &[f64] = if self.cfg.normalize {
                slice
            } else {
                raw = errors[bi][j].clone();
                &raw
            };
            priorities.push(learning::compute_priority(errs, self.cfg.w_max));
        }

        Ok(FrozenPlan {
            batch_size: b,
            t_eff,
            obs,
            feats,
            h0,
            depth_masks,
            action_cols,
            value_targets,
            value_coeff,
            dec_targets_ext,
            dec_targets_int,
            dec_coeff_ext,
            dec_coeff_int,
            distill_coeff,
            ap_obs_t: if ap_actions.is_empty() {
                Mat::zeros(0, 0)
            } else {
                Mat::from_rows(&ap_t)
            },
            ap_obs_t1: if ap_actions.is_empty() {
                Mat::zeros(0, 0)
            } else {
                Mat::from_rows(&ap_t1)
            },
            ap_actions,
            rnd_obs,
            priorities,
            mean_lambda: if lambda_count == 0 {
                0.0
            } else {
                lambda_sum / lambda_count as f64
            },
            masked_frac,
            sigmas,
        })
    }

    /// Value + distillation loss nodes on a tape holding a forward pass.
    fn rl_loss_nodes(
        &self,
        tape: &mut Tape,
        out: &NetOutputs,
        plan: &FrozenPlan,
    ) -> (Var, f64, f64) {
        let rows = plan.batch_size * plan.t_eff;
        let n = self.family.n;
        let mut value_acc: Option<Var> = None;
        let push = |tape: &mut Tape, acc: &mut Option<Var>, v: Var| {
            *acc = Some(match *acc {
                None => v,
                Some(prev) => tape.add(prev, v),
            });
        };
        match self.mode {
            LossMode::Combined | LossMode::SingleHead => {
                for j in 0..n {
                    let sel = tape.select_cols(out.q_comb, plan.action_cols[j].clone());
                    let tgt = tape.constant(Mat::from_vec(rows, 1, plan.value_targets[j].clone()));
                    let d = tape.sub(sel, tgt);
                    let sq = tape.mul(d, d);
                    let lj = tape.weighted_sum_all(
                        sq,
                        Mat::from_vec(rows, 1, plan.value_coeff[j].clone()),
                    );
                    push(tape, &mut value_acc, lj);
                }
            }
            LossMode::Decomposed => {
                let q_i = out.q_i.expect("decomposed mode keeps the intrinsic head");
                for j in 0..n {
                    let sel_e = tape.select_cols(out.q_e, plan.action_cols[j].clone());
                    let tgt_e =
                        tape.constant(Mat::from_vec(rows, 1, plan.dec_targets_ext[j].clone()));
                    let de = tape.sub(sel_e, tgt_e);
                    let sqe = tape.mul(de, de);
                    let le = tape.weighted_sum_all(
                        sqe,
                        Mat::from_vec(rows, 1, plan.dec_coeff_ext[j].clone()),
                    );
                    push(tape, &mut value_acc, le);

                    let sel_i = tape.select_cols(q_i, plan.action_cols[j].clone());
                    let tgt_i =
                        tape.constant(Mat::from_vec(rows, 1, plan.dec_targets_int[j].clone()));
                    let di = tape.sub(sel_i, tgt_i);
                    let sqi = tape.mul(di, di);
                    let li = tape.weighted_sum_all(
                        sqi,
                        Mat::from_vec(rows, 1, plan.dec_coeff_int[j].clone()),
                    );
                    push(tape, &mut value_acc, li);
                }
            }
        }
        let value = value_acc.expect("at least one mixture");
        let value_scalar = tape.scalar(value);
        let (total, distill_scalar) = match &plan.distill_coeff {
            Some(coeff) => {
                let logp = tape.log_clamped(out.policy_probs, 1e-12);
                let dl = tape.weighted_sum_all(logp, coeff.clone());
                let d = tape.scalar(dl);
                (tape.add(value, dl), d)
            }
            None => (value, 0.0),
        };
        (total, value_scalar, distill_scalar)
    }

    /// Builds the losses for the given parameter sets and returns the parts
    /// plus, when `trainable`, the gradients in registry order.
    #[allow(clippy::type_complexity)]
    fn build(
        &self,
        plan: &FrozenPlan,
        rl_params: &ParamSet,
        ap_params: &ParamSet,
        rnd_params: &ParamSet,
        trainable: bool,
    ) -> (LossParts, Option<(Vec<Mat>, Vec<Mat>, Vec<Mat>)>) {
        // agent network: value + distillation
        let mut tape = Tape::new();
        let pv = ParamVars::load(&mut tape, rl_params, trainable);
        let out = self.net.arch.forward(
            &mut tape,
            &pv,
            &plan.obs,
            &plan.feats,
            &plan.h0,
            &plan.depth_masks,
            plan.batch_size,
            plan.t_eff,
        );
        let (rl_total, value, distill) = self.rl_loss_nodes(&mut tape, &out, plan);

        // action-prediction embedder
        let mut ap_tape = Tape::new();
        let ap_pv = ParamVars::load(&mut ap_tape, ap_params, trainable);
        let ap_root = if plan.ap_actions.is_empty() {
            None
        } else {
            Some(self.ap.loss_on_tape(
                &mut ap_tape,
                &ap_pv,
                &plan.ap_obs_t,
                &plan.ap_obs_t1,
                &plan.ap_actions,
            ))
        };
        let ap_loss = ap_root.map(|r| ap_tape.scalar(r)).unwrap_or(0.0);

        // RND predictor
        let mut rnd_tape = Tape::new();
        let rnd_pv = ParamVars::load(&mut rnd_tape, rnd_params, trainable);
        let rnd_root = self.rnd.loss_on_tape(&mut rnd_tape, &rnd_pv, &plan.rnd_obs);
        let rnd_loss = rnd_tape.scalar(rnd_root);

        let parts = LossParts {
            value,
            distill,
            ap: ap_loss,
            rnd: rnd_loss,
        };
        if !trainable {
            return (parts, None);
        }
        let g_rl = {
            let grads = tape.backward(rl_total);
            pv.grads(&tape, &grads, rl_params)
        };
        let g_ap = match ap_root {
            Some(root) => {
                let grads = ap_tape.backward(root);
                ap_pv.grads(&ap_tape, &grads, ap_params)
            }
            None => ap_params
                .mats
                .iter()
                .map(|m| Mat::zeros(m.rows, m.cols))
                .collect(),
        };
        let g_rnd = {
            let grads = rnd_tape.backward(rnd_root);
            rnd_pv.grads(&rnd_tape, &grads, rnd_params)
        };
        (parts, Some((g_rl, g_ap, g_rnd)))
    }

    /// The full composite objective at the given parameters under a frozen
    /// plan; the function the gradient checks differentiate numerically.
    pub fn composite_loss_with(
        &self,
        plan: &FrozenPlan,
        rl_params: &ParamSet,
        ap_params: &ParamSet,
        rnd_params: &ParamSet,
    ) -> f64 {
        self.loss_parts_with(plan, rl_params, ap_params, rnd_params)
            .total()
    }

    /// Individual loss components at the given parameters under a frozen
    /// plan.
    pub fn loss_parts_with(
        &self,
        plan: &FrozenPlan,
        rl_params: &ParamSet,
        ap_params: &ParamSet,
        rnd_params: &ParamSet,
    ) -> LossParts {
        self.build(plan, rl_params, ap_params, rnd_params, false).0
    }

    /// Losses and analytic gradients at the learner's current parameters.
    #[allow(clippy::type_complexity)]
    pub fn losses_and_grads(&self, plan: &FrozenPlan) -> (LossParts, Vec<Mat>, Vec<Mat>, Vec<Mat>) {
        let (parts, grads) = self.build(
            plan,
            &self.net.online,
            &self.ap.params,
            &self.rnd.predictor_params,
            true,
        );
        let (g_rl, g_ap, g_rnd) = grads.expect("trainable build returns gradients");
        (parts, g_rl, g_ap, g_rnd)
    }

    /// One learner update. Returns the new priorities and diagnostics.
    pub fn step(&mut self, batch: &SampleBatch) -> Result<StepOutput, RunError> {
        let plan = self.prepare(batch)?;
        let (parts, g_rl, g_ap, g_rnd) = self.losses_and_grads(&plan);
        if !parts.total().is_finite() {
            return Err(RunError::NonFiniteLoss(format!(
                "losses {parts:?} at step {}, sigmas {:?}, mean_lambda {}",
                self.steps, plan.sigmas, plan.mean_lambda
            )));
        }
        self.opt_rl.step(&mut self.net.online, &g_rl);
        self.opt_ap.step(&mut self.ap.params, &g_ap);
        self.opt_rnd.step(&mut self.rnd.predictor_params, &g_rnd);
        self.net.ema_update(EVAL_PARAM_DECAY);
        self.steps += 1;
        self.net.maybe_sync_target(self.steps, self.cfg.t_target);
        if !self.net.online.is_finite() {
            return Err(RunError::NonFiniteLoss(format!(
                "non-finite parameters after step {}",
                self.steps
            )));
        }
        Ok(StepOutput {
            priorities: plan.priorities,
            losses: parts,
            mean_lambda: plan.mean_lambda,
            masked_frac: plan.masked_frac,
            sigmas: plan.sigmas,
        })
    }
}
