//! Run configuration: a flat `key = value` file, environment-variable
//! overrides (`MIXQ_` prefix, dots to underscores, uppercase), and CLI flag
//! overrides, with flags winning. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key: {0}")]
    UnknownKey(String),
    #[error("bad value for {key}: {value} ({reason})")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("malformed line {0}: expected `key = value`")]
    MalformedLine(usize),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

macro_rules! config_keys {
    ($( $key:literal => $field:ident : $kind:tt ),+ $(,)?) => {
        /// Every key this configuration understands, sorted.
        pub fn known_keys() -> Vec<&'static str> {
            let mut v = vec![$($key),+];
            v.sort_unstable();
            v
        }

        impl RunConfig {
            /// Sets one key from its string form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
                let value = value.trim();
                match key {
                    $( $key => { self.$field = parse_kind!($kind, key, value)?; Ok(()) } ),+,
                    _ => Err(ConfigError::UnknownKey(key.to_string())),
                }
            }

            /// Current value of one key, in the same form `set` accepts.
            pub fn get(&self, key: &str) -> Result<String, ConfigError> {
                match key {
                    $( $key => Ok(show_kind!($kind, self.$field)) ),+,
                    _ => Err(ConfigError::UnknownKey(key.to_string())),
                }
            }
        }
    };
}

macro_rules! parse_kind {
    (usize, $key:expr, $v:expr) => {
        $v.parse::<usize>().map_err(|e| ConfigError::BadValue {
            key: $key.into(),
            value: $v.into(),
            reason: e.to_string(),
        })
    };
    (u64, $key:expr, $v:expr) => {
        $v.parse::<u64>().map_err(|e| ConfigError::BadValue {
            key: $key.into(),
            value: $v.into(),
            reason: e.to_string(),
        })
    };
    (f64, $key:expr, $v:expr) => {
        $v.parse::<f64>().map_err(|e| ConfigError::BadValue {
            key: $key.into(),
            value: $v.into(),
            reason: e.to_string(),
        })
    };
    (switch, $key:expr, $v:expr) => {
        match $v {
            "on" => Ok(true),
            "off" => Ok(false),
            other => Err(ConfigError::BadValue {
                key: $key.into(),
                value: other.into(),
                reason: "expected on|off".into(),
            }),
        }
    };
    (string, $key:expr, $v:expr) => {
        Ok::<String, ConfigError>($v.to_string())
    };
    (opt_f64, $key:expr, $v:expr) => {
        if $v == "none" {
            Ok(None)
        } else {
            $v.parse::<f64>().map(Some).map_err(|e| ConfigError::BadValue {
                key: $key.into(),
                value: $v.into(),
                reason: e.to_string(),
            })
        }
    };
}

macro_rules! show_kind {
    (switch, $v:expr) => {
        if $v { "on".to_string() } else { "off".to_string() }
    };
    (string, $v:expr) => {
        $v.clone()
    };
    (opt_f64, $v:expr) => {
        match $v {
            Some(x) => format!("{x}"),
            None => "none".to_string(),
        }
    };
    ($kind:tt, $v:expr) => {
        format!("{}", $v)
    };
}

/// Full run configuration; field defaults are the desk-scale defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // environment
    pub env_name: String,
    pub env_size: usize,
    pub env_scale: f64,
    // mixture family
    pub mixtures_n: usize,
    pub beta_im: f64,
    pub gamma_max: f64,
    pub gamma_min: f64,
    // bandit meta-controller
    pub bandit_gamma: f64,
    pub bandit_beta: f64,
    pub bandit_epsilon: f64,
    // return estimator
    pub estimator: String,
    pub lambda: f64,
    pub kappa: f64,
    pub rescale: bool,
    pub bootstrap: String,
    // losses
    pub eta: f64,
    pub loss_mode: String,
    pub alpha_trust: f64,
    pub c_kl: f64,
    pub tau: f64,
    pub w_max: f64,
    pub norm_decay: f64,
    pub trust_region: bool,
    pub normalize: bool,
    pub distill: bool,
    // network
    pub torso_width: usize,
    pub torso_blocks: usize,
    pub core_hidden: usize,
    pub head_width: usize,
    pub drop_rate: f64,
    pub t_target: u64,
    // optimizers
    pub lr: f64,
    pub wd: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub ap_lr: f64,
    pub ap_wd: f64,
    pub rnd_lr: f64,
    pub rnd_wd: f64,
    // intrinsic rewards
    pub intrinsic_k: usize,
    pub intrinsic_c: f64,
    pub kernel_eps: f64,
    pub xi: f64,
    pub s_max: f64,
    pub rnd_dim: usize,
    pub rnd_scale: f64,
    pub l_cap: f64,
    pub ap_dim: usize,
    pub intrinsic_hidden: usize,
    // replay
    pub replay_shards: usize,
    pub replay_capacity: usize,
    pub replay_period: usize,
    pub trace_length: usize,
    pub priority_exponent: f64,
    pub is_exponent: f64,
    pub spi: f64,
    // run control
    pub frames: u64,
    pub seed: u64,
    pub actors: usize,
    pub evaluators: usize,
    pub batch_size: usize,
    pub run_mode: String,
    pub eval_interval: u64,
    pub log_interval: u64,
    pub eps_base: f64,
    pub eps_power: f64,
    pub solve_threshold: Option<f64>,
    pub solve_evals: usize,
    pub checkpoint_interval: u64,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            env_name: "deep_sea".into(),
            env_size: 8,
            env_scale: 1.0,
            mixtures_n: 8,
            beta_im: 0.1,
            gamma_max: 0.9997,
            gamma_min: 0.97,
            bandit_gamma: 0.999,
            bandit_beta: 1.0,
            bandit_epsilon: 0.5,
            estimator: "soft_watkins".into(),
            lambda: 0.95,
            kappa: 0.01,
            rescale: true,
            bootstrap: "online".into(),
            eta: 0.5,
            loss_mode: "combined".into(),
            alpha_trust: 2.0,
            c_kl: 0.5,
            tau: 0.25,
            w_max: 0.9,
            norm_decay: 0.99,
            trust_region: true,
            normalize: true,
            distill: true,
            torso_width: 64,
            torso_blocks: 2,
            core_hidden: 128,
            head_width: 128,
            drop_rate: 0.25,
            t_target: 400,
            lr: 3e-4,
            wd: 0.05,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            ap_lr: 6e-4,
            ap_wd: 0.05,
            rnd_lr: 6e-4,
            rnd_wd: 0.0,
            intrinsic_k: 10,
            intrinsic_c: 0.001,
            kernel_eps: 0.0001,
            xi: 0.008,
            s_max: 8.0,
            rnd_dim: 16,
            rnd_scale: 0.5,
            l_cap: 5.0,
            ap_dim: 32,
            intrinsic_hidden: 32,
            replay_shards: 2,
            replay_capacity: 4096,
            replay_period: 8,
            trace_length: 16,
            priority_exponent: 0.6,
            is_exponent: 0.4,
            spi: 6.0,
            frames: 500_000,
            seed: 0,
            actors: 4,
            evaluators: 1,
            batch_size: 16,
            run_mode: "threaded".into(),
            eval_interval: 2000,
            log_interval: 50,
            eps_base: 0.4,
            eps_power: 7.0,
            solve_threshold: None,
            solve_evals: 2,
            checkpoint_interval: 0,
            out_dir: "runs".into(),
        }
    }
}

config_keys! {
    "env.name" => env_name: string,
    "env.size" => env_size: usize,
    "env.scale" => env_scale: f64,
    "mixtures.n" => mixtures_n: usize,
    "mixtures.beta_im" => beta_im: f64,
    "mixtures.gamma_max" => gamma_max: f64,
    "mixtures.gamma_min" => gamma_min: f64,
    "bandit.gamma" => bandit_gamma: f64,
    "bandit.beta" => bandit_beta: f64,
    "bandit.epsilon" => bandit_epsilon: f64,
    "returns.estimator" => estimator: string,
    "returns.lambda" => lambda: f64,
    "returns.kappa" => kappa: f64,
    "returns.rescale" => rescale: switch,
    "returns.bootstrap" => bootstrap: string,
    "loss.eta" => eta: f64,
    "loss.mode" => loss_mode: string,
    "loss.alpha_trust" => alpha_trust: f64,
    "loss.c_kl" => c_kl: f64,
    "loss.tau" => tau: f64,
    "loss.w_max" => w_max: f64,
    "loss.norm_decay" => norm_decay: f64,
    "loss.trust_region" => trust_region: switch,
    "loss.normalize" => normalize: switch,
    "loss.distill" => distill: switch,
    "net.torso_width" => torso_width: usize,
    "net.torso_blocks" => torso_blocks: usize,
    "net.core_hidden" => core_hidden: usize,
    "net.head_width" => head_width: usize,
    "net.drop_rate" => drop_rate: f64,
    "net.t_target" => t_target: u64,
    "optimizer.lr" => lr: f64,
    "optimizer.wd" => wd: f64,
    "optimizer.beta1" => adam_beta1: f64,
    "optimizer.beta2" => adam_beta2: f64,
    "optimizer.eps" => adam_eps: f64,
    "optimizer.ap_lr" => ap_lr: f64,
    "optimizer.ap_wd" => ap_wd: f64,
    "optimizer.rnd_lr" => rnd_lr: f64,
    "optimizer.rnd_wd" => rnd_wd: f64,
    "intrinsic.k" => intrinsic_k: usize,
    "intrinsic.c" => intrinsic_c: f64,
    "intrinsic.kernel_eps" => kernel_eps: f64,
    "intrinsic.xi" => xi: f64,
    "intrinsic.s_max" => s_max: f64,
    "intrinsic.rnd_dim" => rnd_dim: usize,
    "intrinsic.rnd_scale" => rnd_scale: f64,
    "intrinsic.l_cap" => l_cap: f64,
    "intrinsic.ap_dim" => ap_dim: usize,
    "intrinsic.hidden" => intrinsic_hidden: usize,
    "replay.shards" => replay_shards: usize,
    "replay.capacity" => replay_capacity: usize,
    "replay.period" => replay_period: usize,
    "replay.trace_length" => trace_length: usize,
    "replay.priority_exponent" => priority_exponent: f64,
    "replay.is_exponent" => is_exponent: f64,
    "replay.spi" => spi: f64,
    "run.frames" => frames: u64,
    "run.seed" => seed: u64,
    "run.actors" => actors: usize,
    "run.evaluators" => evaluators: usize,
    "run.batch_size" => batch_size: usize,
    "run.mode" => run_mode: string,
    "run.eval_interval" => eval_interval: u64,
    "run.log_interval" => log_interval: u64,
    "run.eps_base" => eps_base: f64,
    "run.eps_power" => eps_power: f64,
    "run.solve_threshold" => solve_threshold: opt_f64,
    "run.solve_evals" => solve_evals: usize,
    "run.checkpoint_interval" => checkpoint_interval: u64,
    "run.out_dir" => out_dir: string,
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or(ConfigError::MalformedLine(i + 1))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Environment-variable overrides: `MIXQ_RUN_SEED=3` sets `run.seed`.
    pub fn apply_env_overrides(&mut self) -> Result<(), ConfigError> {
        for key in known_keys() {
            let var = format!("MIXQ_{}", key.replace('.', "_").to_uppercase());
            if let Ok(v) = std::env::var(&var) {
                self.set(key, &v)?;
            }
        }
        Ok(())
    }

    /// Canonical text form: every key, sorted, one per line.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for key in known_keys() {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("known key"));
        }
        out
    }

    pub fn entries(&self) -> BTreeMap<String, String> {
        known_keys()
            .into_iter()
            .map(|k| (k.to_string(), self.get(k).expect("known key")))
            .collect()
    }

    /// Semantic validation beyond per-key parsing.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Invalid(msg));
        match self.estimator.as_str() {
            "soft_watkins" | "watkins" | "pengs" | "retrace" => {}
            other => return fail(format!("returns.estimator `{other}`")),
        }
        match self.bootstrap.as_str() {
            "online" | "target" => {}
            other => return fail(format!("returns.bootstrap `{other}`")),
        }
        match self.loss_mode.as_str() {
            "combined" | "decomposed" | "single_head" => {}
            other => return fail(format!("loss.mode `{other}`")),
        }
        match self.run_mode.as_str() {
            "sync" | "threaded" => {}
            other => return fail(format!("run.mode `{other}`")),
        }
        if self.mixtures_n < 2 {
            return fail(format!("mixtures.n must be >= 2, got {}", self.mixtures_n));
        }
        if !(0.0 < self.gamma_min && self.gamma_min <= self.gamma_max && self.gamma_max < 1.0) {
            return fail("discount ordering".into());
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return fail("returns.lambda must be in [0, 1]".into());
        }
        if self.kappa < 0.0 {
            return fail("returns.kappa must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return fail("loss.eta must be in [0, 1]".into());
        }
        if self.tau <= 0.0 {
            return fail("loss.tau must be > 0".into());
        }
        if !(0.0..=1.0).contains(&self.w_max) {
            return fail("loss.w_max must be in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return fail("net.drop_rate must be in [0, 1)".into());
        }
        if self.spi <= 0.0 {
            return fail("replay.spi must be > 0".into());
        }
        if self.replay_period == 0 || self.trace_length == 0 || self.replay_period > self.trace_length {
            return fail("need 1 <= replay.period <= replay.trace_length".into());
        }
        if self.replay_capacity < self.batch_size {
            return fail("replay.capacity must hold at least one batch".into());
        }
        if self.actors == 0 || self.batch_size == 0 {
            return fail("run.actors and run.batch_size must be >= 1".into());
        }
        if self.env_size < 2 {
            return fail("env.size must be >= 2".into());
        }
        if !(0.0..=1.0).contains(&self.bandit_epsilon) {
            return fail("bandit.epsilon must be in [0, 1]".into());
        }
        Ok(())
    }
}
