//! Forward-view Q(λ) return engine with pluggable trace-cutting policies.
//!
//! The estimator computes, for every timestep of an off-policy sequence,
//!
//! ```text
//! G_t = V(x_t) + sum_{k>=0} (prod_{m=1..k} λ_{t+m}) γ^k δ_{t+k}
//! δ_t = r_t + γ V(x_{t+1}) - V(x_t)
//! ```
//!
//! where `V` is either `max_a Q(x,a)` or the expectation of `Q` under the
//! target policy, and the per-timestep trace coefficient λ comes from the
//! chosen cutting policy (Soft Watkins, Watkins, Peng's, Retrace). The trace
//! coefficient for a timestep is evaluated from that timestep's own
//! quantities; the coefficient applied to the TD term at offset `k` is the
//! product of coefficients at timesteps `t+1 ..= t+k`, so the first
//! correction term always enters in full and Watkins' classical cut is
//! recovered for κ = 0 with a greedy target policy.
//!
//! All Bellman algebra happens in untransformed value space; callers that
//! train on rescaled values convert with [`rescale`] / [`unrescale`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Linear-term coefficient of the invertible value rescaling.
pub const RESCALE_EPS: f64 = 1e-3;

/// Invertible value rescaling `h(x) = sgn(x)(sqrt(x^2+1)-1) + 0.001x`.
pub fn rescale(x: f64) -> f64 {
    x.signum() * ((x * x + 1.0).sqrt() - 1.0) + RESCALE_EPS * x
}

/// Exact closed-form inverse of [`rescale`].
///
/// With `u = |y|` the positive branch solves to
/// `x = (sqrt(u(u+2) + eps^2) - eps(u+1)) / (1 - eps^2)`; the `u(u+2)` form
/// avoids the cancellation in `(u+1)^2 - 1` for small `y`.
pub fn unrescale(y: f64) -> f64 {
    let eps = RESCALE_EPS;
    let u = y.abs();
    let disc = u * (u + 2.0) + eps * eps;
    y.signum() * (disc.sqrt() - eps * (u + 1.0)) / (1.0 - eps * eps)
}

/// Derivative of [`rescale`]; strictly positive, minimum `eps` at the origin.
pub fn rescale_deriv(x: f64) -> f64 {
    x.abs() / (x * x + 1.0).sqrt() + RESCALE_EPS
}

#[derive(Debug, Error, PartialEq)]
pub enum ReturnsError {
    #[error("empty sequence")]
    EmptySequence,
    #[error("non-finite input at timestep {0}")]
    NonFinite(usize),
    #[error("target policy row {0} does not sum to 1")]
    BadTargetPolicy(usize),
    #[error("behavior probability out of (0, 1] at timestep {0}")]
    BadBehaviorProb(usize),
    #[error("discount out of [0, 1) at timestep {0}")]
    BadDiscount(usize),
    #[error("termination flag set before the last timestep ({0})")]
    MidSequenceTerminal(usize),
    #[error("non-terminal sequence requires bootstrap Q values")]
    MissingBootstrap,
    #[error("shape mismatch: {0}")]
    Shape(&'static str),
}

/// Per-timestep inputs for one sequence and one mixture, in untransformed
/// value space. `q` and `target_policy` are laid out `[t * actions + a]`.
#[derive(Debug, Clone)]
pub struct TraceInputs {
    pub actions_per_state: usize,
    pub rewards: Vec<f64>,
    pub discounts: Vec<f64>,
    pub actions: Vec<usize>,
    pub behavior_probs: Vec<f64>,
    pub target_policy: Vec<f64>,
    pub q: Vec<f64>,
    pub dones: Vec<bool>,
    /// Q values for the state after the last timestep; required unless the
    /// last timestep terminates the episode.
    pub bootstrap_q: Option<Vec<f64>>,
    /// Target policy at the bootstrap state, for expectation bootstraps.
    pub bootstrap_policy: Option<Vec<f64>>,
}

impl TraceInputs {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    fn q_row(&self, t: usize) -> &[f64] {
        let a = self.actions_per_state;
        &self.q[t * a..(t + 1) * a]
    }

    fn pi_row(&self, t: usize) -> &[f64] {
        let a = self.actions_per_state;
        &self.target_policy[t * a..(t + 1) * a]
    }

    pub fn validate(&self) -> Result<(), ReturnsError> {
        let t_len = self.len();
        if t_len == 0 {
            return Err(ReturnsError::EmptySequence);
        }
        let a = self.actions_per_state;
        if self.discounts.len() != t_len
            || self.actions.len() != t_len
            || self.behavior_probs.len() != t_len
            || self.dones.len() != t_len
            || self.q.len() != t_len * a
            || self.target_policy.len() != t_len * a
        {
            return Err(ReturnsError::Shape("per-timestep arrays disagree on length"));
        }
        for t in 0..t_len {
            if !self.rewards[t].is_finite()
                || !self.q_row(t).iter().all(|v| v.is_finite())
                || !self.pi_row(t).iter().all(|v| v.is_finite())
            {
                return Err(ReturnsError::NonFinite(t));
            }
            let psum: f64 = self.pi_row(t).iter().sum();
            if (psum - 1.0).abs() > 1e-9 || self.pi_row(t).iter().any(|&p| p < 0.0) {
                return Err(ReturnsError::BadTargetPolicy(t));
            }
            let mu = self.behavior_probs[t];
            if !(mu > 0.0 && mu <= 1.0) {
                return Err(ReturnsError::BadBehaviorProb(t));
            }
            let g = self.discounts[t];
            if !(0.0..1.0).contains(&g) {
                return Err(ReturnsError::BadDiscount(t));
            }
            if self.actions[t] >= a {
                return Err(ReturnsError::Shape("action index out of range"));
            }
            if self.dones[t] && t + 1 != t_len {
                return Err(ReturnsError::MidSequenceTerminal(t));
            }
        }
        let terminal = self.dones[t_len - 1];
        if !terminal {
            match &self.bootstrap_q {
                None => return Err(ReturnsError::MissingBootstrap),
                Some(q) => {
                    if q.len() != a || q.iter().any(|v| !v.is_finite()) {
                        return Err(ReturnsError::Shape("bad bootstrap Q row"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// How the state value used in δ and as the leading term is derived from Q.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BootstrapPolicy {
    /// `V(x) = max_a Q(x, a)`.
    MaxQ,
    /// `V(x) = E_{a~π}[Q(x, a)]`; the Soft Watkins convention, which replaces
    /// every occurrence of the max operator with the expectation under π.
    ExpectedPolicy,
}

impl BootstrapPolicy {
    fn value(&self, q: &[f64], pi: &[f64]) -> f64 {
        match self {
            BootstrapPolicy::MaxQ => q.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            BootstrapPolicy::ExpectedPolicy => q.iter().zip(pi).map(|(&q, &p)| q * p).sum(),
        }
    }
}

/// Trace-cutting policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaPolicy {
    SoftWatkins { lambda: f64, kappa: f64 },
    Watkins { lambda: f64 },
    Pengs { lambda: f64 },
    Retrace { lambda: f64 },
}

impl LambdaPolicy {
    pub fn lambda(&self) -> f64 {
        match *self {
            LambdaPolicy::SoftWatkins { lambda, .. }
            | LambdaPolicy::Watkins { lambda }
            | LambdaPolicy::Pengs { lambda }
            | LambdaPolicy::Retrace { lambda } => lambda,
        }
    }

    /// Per-timestep trace coefficients for a validated input sequence.
    pub fn coefficients(&self, inputs: &TraceInputs) -> Vec<f64> {
        match *self {
            LambdaPolicy::SoftWatkins { lambda, kappa } => {
                soft_watkins_lambda(inputs, lambda, kappa)
            }
            LambdaPolicy::Watkins { lambda } => watkins_lambda(inputs, lambda),
            LambdaPolicy::Pengs { lambda } => pengs_lambda(lambda, inputs.len()),
            LambdaPolicy::Retrace { lambda } => retrace_lambda(inputs, lambda),
        }
    }
}

/// Soft Watkins coefficients:
/// `λ_i = λ E_{a~π(.|x_i)}[ 1{ Q(x_i, a_i) >= Q(x_i, a) - κ|Q(x_i, a)| } ]`.
///
/// All quantities are evaluated at the trace timestep `i`, and the tolerance
/// is relative to each compared action's own magnitude.
pub fn soft_watkins_lambda(inputs: &TraceInputs, lambda: f64, kappa: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let q = inputs.q_row(t);
        let pi = inputs.pi_row(t);
        let qa = q[inputs.actions[t]];
        let mut mass = 0.0;
        for (a, &p) in pi.iter().enumerate() {
            if qa >= q[a] - kappa * q[a].abs() {
                mass += p;
            }
        }
        out.push(lambda * mass);
    }
    out
}

/// Watkins' hard cut: `λ_i = λ 1{ a_i ∈ argmax_a Q(x_i, a) }`.
pub fn watkins_lambda(inputs: &TraceInputs, lambda: f64) -> Vec<f64> {
    (0..inputs.len())
        .map(|t| {
            let q = inputs.q_row(t);
            let max = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if q[inputs.actions[t]] >= max {
                lambda
            } else {
                0.0
            }
        })
        .collect()
}

/// Peng's constant coefficients (no off-policy correction).
pub fn pengs_lambda(lambda: f64, len: usize) -> Vec<f64> {
    vec![lambda; len]
}

/// Retrace coefficients `λ_i = λ min(1, π(a_i|x_i) / μ(a_i|x_i))`.
pub fn retrace_lambda(inputs: &TraceInputs, lambda: f64) -> Vec<f64> {
    (0..inputs.len())
        .map(|t| {
            let pi = inputs.pi_row(t)[inputs.actions[t]];
            let mu = inputs.behavior_probs[t];
            lambda * (pi / mu).min(1.0)
        })
        .collect()
}

/// Per-timestep return estimates plus the trace coefficients that were used.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnEstimate {
    pub g: Vec<f64>,
    pub lambdas: Vec<f64>,
}

/// Computes the forward-view returns for every timestep of the sequence.
///
/// Terminal states bootstrap zero; non-terminal sequences bootstrap from the
/// provided post-sequence Q row. The λ products and discounts never cross the
/// episode boundary.
pub fn general_qlambda(
    inputs: &TraceInputs,
    lambda_policy: &LambdaPolicy,
    bootstrap: BootstrapPolicy,
) -> Result<ReturnEstimate, ReturnsError> {
    inputs.validate()?;
    let lambdas = lambda_policy.coefficients(inputs);
    debug_assert!(lambdas
        .iter()
        .all(|&l| (-1e-12..=lambda_policy.lambda() + 1e-12).contains(&l)));
    general_qlambda_with(inputs, &lambdas, bootstrap)
}

/// [`general_qlambda`] with externally supplied trace coefficients, for
/// callers that share one set of coefficients across several value
/// decompositions.
pub fn general_qlambda_with(
    inputs: &TraceInputs,
    lambdas: &[f64],
    bootstrap: BootstrapPolicy,
) -> Result<ReturnEstimate, ReturnsError> {
    inputs.validate()?;
    let t_len = inputs.len();
    if lambdas.len() != t_len {
        return Err(ReturnsError::Shape("lambda coefficients length"));
    }

    let mut values = Vec::with_capacity(t_len + 1);
    for t in 0..t_len {
        values.push(bootstrap.value(inputs.q_row(t), inputs.pi_row(t)));
    }
    let terminal = inputs.dones[t_len - 1];
    let v_boot = if terminal {
        0.0
    } else {
        let q = inputs.bootstrap_q.as_ref().expect("validated");
        match (&inputs.bootstrap_policy, bootstrap) {
            (_, BootstrapPolicy::MaxQ) => bootstrap.value(q, &[]),
            (Some(pi), BootstrapPolicy::ExpectedPolicy) => bootstrap.value(q, pi),
            (None, BootstrapPolicy::ExpectedPolicy) => {
                return Err(ReturnsError::Shape(
                    "expectation bootstrap requires bootstrap_policy",
                ))
            }
        }
    };
    values.push(v_boot);

    let mut g = vec![0.0; t_len];
    let mut carry = 0.0; // G_{t+1} - V_{t+1}
    for t in (0..t_len).rev() {
        let delta = inputs.rewards[t] + inputs.discounts[t] * values[t + 1] - values[t];
        let trace = if t + 1 < t_len {
            inputs.discounts[t] * lambdas[t + 1] * carry
        } else {
            0.0
        };
        carry = delta + trace;
        g[t] = values[t] + carry;
        if !g[t].is_finite() {
            return Err(ReturnsError::NonFinite(t));
        }
    }
    Ok(ReturnEstimate {
        g,
        lambdas: lambdas.to_vec(),
    })
}

/// Independent brute-force evaluation of the return definition, used by the
/// oracle-equivalence suites. Kept free of the recursive implementation
/// above on purpose: this is the second route the estimator is checked
/// against.
pub mod oracle {
    use super::*;
    use rand::Rng;

    /// Brute-force term-by-term evaluation of the return definition. Kept
    /// deliberately independent of the recursive implementation above.
    pub fn oracle_returns(
        inputs: &TraceInputs,
        lambdas: &[f64],
        bootstrap: BootstrapPolicy,
    ) -> Vec<f64> {
        let t_len = inputs.len();
        let a = inputs.actions_per_state;
        let value = |t: usize| -> f64 {
            if t == t_len {
                if inputs.dones[t_len - 1] {
                    0.0
                } else {
                    let q = inputs.bootstrap_q.as_ref().unwrap();
                    match bootstrap {
                        BootstrapPolicy::MaxQ => q.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                        BootstrapPolicy::ExpectedPolicy => {
                            let pi = inputs.bootstrap_policy.as_ref().unwrap();
                            q.iter().zip(pi).map(|(&q, &p)| q * p).sum()
                        }
                    }
                }
            } else {
                let q = &inputs.q[t * a..(t + 1) * a];
                match bootstrap {
                    BootstrapPolicy::MaxQ => q.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                    BootstrapPolicy::ExpectedPolicy => {
                        let pi = &inputs.target_policy[t * a..(t + 1) * a];
                        q.iter().zip(pi).map(|(&q, &p)| q * p).sum()
                    }
                }
            }
        };
        (0..t_len)
            .map(|t| {
                let mut acc = value(t);
                for k in 0..t_len - t {
                    let mut coeff = 1.0;
                    for m in 1..=k {
                        coeff *= lambdas[t + m];
                    }
                    let mut disc = 1.0;
                    for j in 0..k {
                        disc *= inputs.discounts[t + j];
                    }
                    let s = t + k;
                    let delta = inputs.rewards[s] + inputs.discounts[s] * value(s + 1) - value(s);
                    acc += coeff * disc * delta;
                }
                acc
            })
            .collect()
    }

    /// Random enumerable instance: <= `max_states` states, 2 actions,
    /// horizon <= `max_horizon`, random Q tables, rewards and policies.
    pub fn random_instance<R: Rng>(
        rng: &mut R,
        max_horizon: usize,
        terminal_bias: f64,
    ) -> TraceInputs {
        let actions = 2;
        let horizon = rng.gen_range(1..=max_horizon);
        let n_states = rng.gen_range(1..=4usize);
        // Per-state tables so repeated visits share Q/π as in a real MDP.
        let q_table: Vec<Vec<f64>> = (0..n_states)
            .map(|_| (0..actions).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let pi_table: Vec<Vec<f64>> = (0..n_states)
            .map(|_| {
                let x: f64 = rng.gen_range(0.01..0.99);
                vec![x, 1.0 - x]
            })
            .collect();
        let states: Vec<usize> = (0..horizon + 1).map(|_| rng.gen_range(0..n_states)).collect();
        let gamma = rng.gen_range(0.0..0.999);
        let mut inputs = TraceInputs {
            actions_per_state: actions,
            rewards: (0..horizon).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            discounts: vec![gamma; horizon],
            actions: (0..horizon).map(|_| rng.gen_range(0..actions)).collect(),
            behavior_probs: (0..horizon).map(|_| rng.gen_range(0.05..1.0)).collect(),
            target_policy: states[..horizon]
                .iter()
                .flat_map(|&s| pi_table[s].clone())
                .collect(),
            q: states[..horizon]
                .iter()
                .flat_map(|&s| q_table[s].clone())
                .collect(),
            dones: vec![false; horizon],
            bootstrap_q: Some(q_table[states[horizon]].clone()),
            bootstrap_policy: Some(pi_table[states[horizon]].clone()),
        };
        if rng.gen_bool(terminal_bias) {
            inputs.dones[horizon - 1] = true;
            inputs.bootstrap_q = None;
            inputs.bootstrap_policy = None;
        }
        inputs
    }
}

#[cfg(test)]
mod tests {
    use super::oracle::*;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single_step(reward: f64, done: bool) -> TraceInputs {
        TraceInputs {
            actions_per_state: 2,
            rewards: vec![reward],
            discounts: vec![0.9],
            actions: vec![0],
            behavior_probs: vec![1.0],
            target_policy: vec![0.5, 0.5],
            q: vec![0.3, -0.2],
            dones: vec![done],
            bootstrap_q: if done { None } else { Some(vec![1.0, 2.0]) },
            bootstrap_policy: if done { None } else { Some(vec![0.5, 0.5]) },
        }
    }

    #[test]
    fn single_terminal_step_returns_reward() {
        let est = general_qlambda(
            &single_step(1.0, true),
            &LambdaPolicy::Pengs { lambda: 0.95 },
            BootstrapPolicy::MaxQ,
        )
        .unwrap();
        assert_eq!(est.g, vec![1.0]);
    }

    #[test]
    fn lambda_zero_reduces_to_one_step_td() {
        // With λ = 0 only the k = 0 term survives: G_t = r_t + γ max_a Q(x_{t+1}, a).
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let inputs = random_instance(&mut rng, 5, 0.3);
            let est = general_qlambda(
                &inputs,
                &LambdaPolicy::Pengs { lambda: 0.0 },
                BootstrapPolicy::MaxQ,
            )
            .unwrap();
            let a = inputs.actions_per_state;
            for t in 0..inputs.len() {
                let v_next = if t + 1 < inputs.len() {
                    inputs.q[(t + 1) * a..(t + 2) * a]
                        .iter()
                        .cloned()
                        .fold(f64::NEG_INFINITY, f64::max)
                } else if inputs.dones[t] {
                    0.0
                } else {
                    inputs
                        .bootstrap_q
                        .as_ref()
                        .unwrap()
                        .iter()
                        .cloned()
                        .fold(f64::NEG_INFINITY, f64::max)
                };
                let expect = inputs.rewards[t] + inputs.discounts[t] * v_next;
                assert!((est.g[t] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn three_step_peng_matches_brute_force() {
        // Hand-set 3-step chain, λ = 1; value must equal the brute-force
        // expansion of the return definition term by term.
        let inputs = TraceInputs {
            actions_per_state: 2,
            rewards: vec![0.5, -1.0, 2.0],
            discounts: vec![0.9, 0.9, 0.9],
            actions: vec![0, 1, 0],
            behavior_probs: vec![0.7, 0.6, 0.9],
            target_policy: vec![0.8, 0.2, 0.3, 0.7, 0.5, 0.5],
            q: vec![1.0, 0.0, 0.5, 1.5, -0.5, 0.25],
            dones: vec![false, false, true],
            bootstrap_q: None,
            bootstrap_policy: None,
        };
        let policy = LambdaPolicy::Pengs { lambda: 1.0 };
        let est = general_qlambda(&inputs, &policy, BootstrapPolicy::MaxQ).unwrap();
        let oracle = oracle_returns(&inputs, &est.lambdas, BootstrapPolicy::MaxQ);
        for (g, o) in est.g.iter().zip(&oracle) {
            assert!((g - o).abs() < 1e-12, "{g} vs {o}");
        }
    }

    #[test]
    fn oracle_equivalence_over_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let policies = |rng: &mut ChaCha8Rng| {
            let lambda = rng.gen_range(0.0..=1.0);
            [
                LambdaPolicy::SoftWatkins { lambda, kappa: 0.01 },
                LambdaPolicy::Watkins { lambda },
                LambdaPolicy::Pengs { lambda },
                LambdaPolicy::Retrace { lambda },
            ]
        };
        for i in 0..400 {
            let inputs = random_instance(&mut rng, 5, 0.3);
            for policy in policies(&mut rng) {
                for bootstrap in [BootstrapPolicy::MaxQ, BootstrapPolicy::ExpectedPolicy] {
                    let est = general_qlambda(&inputs, &policy, bootstrap).unwrap();
                    let oracle = oracle_returns(&inputs, &est.lambdas, bootstrap);
                    for (t, (g, o)) in est.g.iter().zip(&oracle).enumerate() {
                        assert!(
                            (g - o).abs() < 1e-10,
                            "instance {i} {policy:?} {bootstrap:?} t={t}: {g} vs {o}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn soft_watkins_examples() {
        // Greedy action taken: indicator holds for every action, λ_i = λ.
        let mk = |q: Vec<f64>, action: usize, pi: Vec<f64>| TraceInputs {
            actions_per_state: 2,
            rewards: vec![0.0],
            discounts: vec![0.9],
            actions: vec![action],
            behavior_probs: vec![0.5],
            target_policy: pi,
            q,
            dones: vec![true],
            bootstrap_q: None,
            bootstrap_policy: None,
        };
        let l = soft_watkins_lambda(&mk(vec![2.0, 1.0], 0, vec![0.3, 0.7]), 0.95, 0.3);
        assert_eq!(l, vec![0.95]);

        // κ = 0 with greedy π and a non-greedy action: Watkins recovered (cut).
        let l = soft_watkins_lambda(&mk(vec![2.0, 1.0], 1, vec![1.0, 0.0]), 0.95, 0.0);
        assert_eq!(l, vec![0.0]);

        // Tolerance admits a nearly-greedy action for the whole π mass.
        let l = soft_watkins_lambda(&mk(vec![1.0, 1.005], 0, vec![0.5, 0.5]), 0.95, 0.01);
        assert!((l[0] - 0.95).abs() < 1e-12);
    }

    #[test]
    fn retrace_examples() {
        let mk = |pi_a: f64, mu: f64| TraceInputs {
            actions_per_state: 2,
            rewards: vec![0.0],
            discounts: vec![0.9],
            actions: vec![0],
            behavior_probs: vec![mu],
            target_policy: vec![pi_a, 1.0 - pi_a],
            q: vec![0.0, 0.0],
            dones: vec![true],
            bootstrap_q: None,
            bootstrap_policy: None,
        };
        assert_eq!(retrace_lambda(&mk(0.4, 0.4), 0.95), vec![0.95]);
        assert_eq!(retrace_lambda(&mk(0.0, 0.4), 0.95), vec![0.0]);
        let l = retrace_lambda(&mk(0.2, 0.4), 0.95);
        assert!((l[0] - 0.475).abs() < 1e-12);
    }

    #[test]
    fn pengs_is_constant() {
        assert_eq!(pengs_lambda(0.95, 3), vec![0.95; 3]);
        assert_eq!(pengs_lambda(0.0, 2), vec![0.0; 2]);
        assert_eq!(pengs_lambda(1.0, 4), vec![1.0; 4]);
    }

    #[test]
    fn watkins_recovered_from_soft_watkins() {
        // κ = 0 and greedy π make the Soft Watkins coefficients (and hence
        // the returns) identical to Watkins' hard cut.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..200 {
            let mut inputs = random_instance(&mut rng, 5, 0.3);
            let a = inputs.actions_per_state;
            // make π greedy w.r.t. Q everywhere (ties go to lower index)
            for t in 0..inputs.len() {
                let q = &inputs.q[t * a..(t + 1) * a];
                let best = if q[0] >= q[1] { 0 } else { 1 };
                for j in 0..a {
                    inputs.target_policy[t * a + j] = if j == best { 1.0 } else { 0.0 };
                }
            }
            if let Some(bq) = &inputs.bootstrap_q {
                let best = if bq[0] >= bq[1] { 0 } else { 1 };
                inputs.bootstrap_policy = Some(vec![
                    if best == 0 { 1.0 } else { 0.0 },
                    if best == 1 { 1.0 } else { 0.0 },
                ]);
            }
            let lambda = rng.gen_range(0.0..=1.0);
            let soft = general_qlambda(
                &inputs,
                &LambdaPolicy::SoftWatkins { lambda, kappa: 0.0 },
                BootstrapPolicy::MaxQ,
            )
            .unwrap();
            let hard = general_qlambda(
                &inputs,
                &LambdaPolicy::Watkins { lambda },
                BootstrapPolicy::MaxQ,
            )
            .unwrap();
            assert_eq!(soft.lambdas, hard.lambdas);
            assert_eq!(soft.g, hard.g);
        }
    }

    #[test]
    fn lambda_bounds_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..200 {
            let inputs = random_instance(&mut rng, 5, 0.2);
            let lambda = rng.gen_range(0.0..=1.0);
            for policy in [
                LambdaPolicy::SoftWatkins { lambda, kappa: 0.01 },
                LambdaPolicy::Watkins { lambda },
                LambdaPolicy::Pengs { lambda },
                LambdaPolicy::Retrace { lambda },
            ] {
                for l in policy.coefficients(&inputs) {
                    assert!((0.0..=lambda + 1e-15).contains(&l));
                }
            }
        }
    }

    #[test]
    fn error_paths() {
        let mut inputs = single_step(1.0, false);
        inputs.bootstrap_q = None;
        assert_eq!(
            general_qlambda(
                &inputs,
                &LambdaPolicy::Pengs { lambda: 0.5 },
                BootstrapPolicy::MaxQ
            )
            .unwrap_err(),
            ReturnsError::MissingBootstrap
        );

        let mut inputs = single_step(1.0, true);
        inputs.q[0] = f64::NAN;
        assert!(matches!(
            general_qlambda(
                &inputs,
                &LambdaPolicy::Pengs { lambda: 0.5 },
                BootstrapPolicy::MaxQ
            ),
            Err(ReturnsError::NonFinite(0))
        ));

        let empty = TraceInputs {
            actions_per_state: 2,
            rewards: vec![],
            discounts: vec![],
            actions: vec![],
            behavior_probs: vec![],
            target_policy: vec![],
            q: vec![],
            dones: vec![],
            bootstrap_q: None,
            bootstrap_policy: None,
        };
        assert_eq!(
            general_qlambda(
                &empty,
                &LambdaPolicy::Pengs { lambda: 0.5 },
                BootstrapPolicy::MaxQ
            )
            .unwrap_err(),
            ReturnsError::EmptySequence
        );
    }

    #[test]
    fn rescale_matches_hand_values() {
        assert_eq!(rescale(0.0), 0.0);
        let h1 = rescale(1.0);
        assert!((h1 - (2.0f64.sqrt() - 1.0 + 0.001)).abs() < 1e-12);
        assert!((h1 - 0.41521).abs() < 1e-5);
        // strictly increasing and odd-symmetric up to the linear term
        assert!(rescale(2.0) > rescale(1.0));
        assert!((rescale(-1.0) + h1).abs() < 1e-12);
    }

    #[test]
    fn rescale_roundtrip_log_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20_000 {
            let mag = 10f64.powf(rng.gen_range(-6.0..6.0));
            let x = if rng.gen_bool(0.5) { mag } else { -mag };
            let back = unrescale(rescale(x));
            assert!((back - x).abs() <= 1e-9, "x={x} back={back}");
        }
        assert_eq!(unrescale(rescale(0.0)), 0.0);
    }
}
