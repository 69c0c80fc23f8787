//! Concurrent orchestration of actors, learner, evaluators, and the bandit
//! service inside one process.
//!
//! Two drivers share all role logic. The synchronous driver interleaves
//! actor steps, gated learner steps and evaluator episodes on one thread in
//! a fixed order, so a fixed seed reproduces a run bit for bit. The threaded
//! driver runs each role in its own thread, communicating only through the
//! replay shards, the bandit service, the snapshot register and the metrics
//! sink.

pub mod actor;
pub mod learner;
pub mod metrics;
pub mod snapshot;

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::env;
use crate::family::{BanditState, FamilyError, MixtureFamily};
use crate::intrinsic::{ApEmbedder, RndPair};
use crate::nn::agent::AgentNetwork;
use crate::replay::ReplaySet;

pub use actor::{actor_epsilon, Actor, EpisodeReport, Evaluator};
pub use learner::{FrozenPlan, Learner, LossParts, StepOutput};
pub use metrics::{trapezoid_auc, MetricRecord, MetricsSink, RunMetrics, RunSummary};
pub use snapshot::{Snapshot, SnapshotRegister};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("configuration: {0}")]
    Config(#[from] ConfigError),
    #[error("environment: {0}")]
    Env(#[from] env::EnvError),
    #[error("mixture family: {0}")]
    Family(#[from] FamilyError),
    #[error("setup: {0}")]
    Setup(String),
    #[error("non-finite loss, aborting run: {0}")]
    NonFiniteLoss(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

/// Serialized training state written at checkpoint intervals.
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: u64,
    pub frames: u64,
    pub net: AgentNetwork,
    pub rnd: RndPair,
    pub ap: ApEmbedder,
    pub bandit: BanditState,
}

/// Builds the mixture family for a config; `mixtures.beta_im = 0` disables
/// intrinsic rewards outright (every mixture weight zero).
pub fn family_for(cfg: &RunConfig) -> Result<(MixtureFamily, bool), RunError> {
    if cfg.beta_im > 0.0 {
        Ok((
            MixtureFamily::new(cfg.mixtures_n, cfg.beta_im, cfg.gamma_max, cfg.gamma_min)?,
            true,
        ))
    } else {
        let gammas = crate::family::build_gammas(cfg.mixtures_n, cfg.gamma_max, cfg.gamma_min)?;
        Ok((
            MixtureFamily {
                n: cfg.mixtures_n,
                beta_im: 0.0,
                gamma_max: cfg.gamma_max,
                gamma_min: cfg.gamma_min,
                betas: vec![0.0; cfg.mixtures_n],
                gammas,
            },
            false,
        ))
    }
}

/// State shared across role threads; everything in here is `Sync`.
struct Hub {
    frames_budget: u64,
    solve_threshold: Option<f64>,
    solve_evals: usize,
    sink: Arc<MetricsSink>,
    bandit: Arc<Mutex<BanditState>>,
    frames: AtomicU64,
    episodes: AtomicU64,
    learner_steps: AtomicU64,
    solve_hits: AtomicUsize,
    solved: AtomicBool,
    best_eval: Mutex<Option<f64>>,
    frames_to_threshold: Mutex<Option<u64>>,
}

impl Hub {
    fn record_base(&self, role: &str) -> MetricRecord {
        let mut r = MetricRecord::blank(role);
        r.frames = self.frames.load(Ordering::SeqCst).min(self.frames_budget);
        r.learner_steps = self.learner_steps.load(Ordering::SeqCst);
        r
    }

    fn on_actor_episode(&self, report: &EpisodeReport) {
        self.episodes.fetch_add(1, Ordering::SeqCst);
        self.bandit
            .lock()
            .unwrap()
            .update(report.mixture, report.return_ext)
            .expect("mixture index in range");
        let mut rec = self.record_base("actor");
        rec.episode_return = Some(report.return_ext);
        rec.mixture = Some(report.mixture);
        self.sink.push(rec);
    }

    /// Records an evaluator episode and runs the solve check. Returns true
    /// when the run should stop early.
    fn on_eval_episode(&self, mixture: usize, ret: f64) -> bool {
        let mut rec = self.record_base("evaluator");
        rec.episode_return = Some(ret);
        rec.mixture = Some(mixture);
        self.sink.push(rec);
        {
            let mut best = self.best_eval.lock().unwrap();
            if best.map_or(true, |b| ret > b) {
                *best = Some(ret);
            }
        }
        if let Some(th) = self.solve_threshold {
            if ret >= th {
                let mut ftt = self.frames_to_threshold.lock().unwrap();
                if ftt.is_none() {
                    *ftt = Some(self.frames.load(Ordering::SeqCst).min(self.frames_budget));
                }
                drop(ftt);
                let hits = self.solve_hits.fetch_add(1, Ordering::SeqCst) + 1;
                if hits >= self.solve_evals {
                    self.solved.store(true, Ordering::SeqCst);
                    return true;
                }
            } else {
                self.solve_hits.store(0, Ordering::SeqCst);
            }
        }
        false
    }
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub family: MixtureFamily,
    pub intrinsic_on: bool,
    pub replay: Arc<ReplaySet>,
    pub learner: Learner,
    pub register: Arc<SnapshotRegister>,
    hub: Arc<Hub>,
    actors: Vec<Actor>,
    evaluators: Vec<Evaluator>,
    sample_rng: ChaCha8Rng,
    sigma_trace: Vec<Vec<f64>>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self, RunError> {
        cfg.validate()?;
        let (family, intrinsic_on) = family_for(&cfg)?;
        let probe = env::make(&cfg.env_name, cfg.env_size, cfg.env_scale, cfg.seed)?;
        let obs_dim = probe.observation_dim();
        let num_actions = probe.num_actions();
        drop(probe);

        let learner = Learner::new(
            &cfg,
            family.clone(),
            obs_dim,
            num_actions,
            cfg.seed.wrapping_add(0x1000),
        )?;
        let register = Arc::new(SnapshotRegister::new(Snapshot {
            version: 0,
            acting: learner.net.online.clone(),
            eval: learner.net.eval.clone(),
            ap: learner.ap.clone(),
            rnd: learner.rnd.clone(),
        }));
        let replay = Arc::new(ReplaySet::new(
            cfg.replay_shards,
            cfg.replay_capacity,
            cfg.priority_exponent,
        ));
        let bandit = Arc::new(Mutex::new(BanditState::new(
            family.n,
            cfg.bandit_gamma,
            cfg.bandit_beta,
            cfg.bandit_epsilon,
        )));
        let arch = Arc::new(learner.net.arch.clone());
        let wall_clock = cfg.run_mode != "sync";
        let sink = Arc::new(MetricsSink::new(wall_clock));

        let actors = (0..cfg.actors)
            .map(|i| {
                let env = env::make(&cfg.env_name, cfg.env_size, cfg.env_scale, cfg.seed)?;
                Ok(Actor::new(
                    i,
                    &cfg,
                    env,
                    Arc::clone(&arch),
                    &register,
                    cfg.seed.wrapping_add(0x3000 + i as u64),
                ))
            })
            .collect::<Result<Vec<_>, RunError>>()?;
        let evaluators = (0..cfg.evaluators)
            .map(|_| {
                let env = env::make(&cfg.env_name, cfg.env_size, cfg.env_scale, cfg.seed)?;
                Ok(Evaluator::new(&cfg, env, Arc::clone(&arch), intrinsic_on))
            })
            .collect::<Result<Vec<_>, RunError>>()?;

        let hub = Arc::new(Hub {
            frames_budget: cfg.frames,
            solve_threshold: cfg.solve_threshold,
            solve_evals: cfg.solve_evals,
            sink,
            bandit,
            frames: AtomicU64::new(0),
            episodes: AtomicU64::new(0),
            learner_steps: AtomicU64::new(0),
            solve_hits: AtomicUsize::new(0),
            solved: AtomicBool::new(false),
            best_eval: Mutex::new(None),
            frames_to_threshold: Mutex::new(None),
        });
        let sample_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x2000));
        Ok(Trainer {
            family,
            intrinsic_on,
            replay,
            learner,
            register,
            hub,
            actors,
            evaluators,
            sample_rng,
            sigma_trace: Vec::new(),
            checkpoint_dir: None,
            cfg,
        })
    }

    pub fn bandit(&self) -> &Arc<Mutex<BanditState>> {
        &self.hub.bandit
    }

    pub fn sink(&self) -> &Arc<MetricsSink> {
        &self.hub.sink
    }

    fn publish_snapshot(&self) {
        self.register.publish(Snapshot {
            version: self.learner.steps,
            acting: self.learner.net.online.clone(),
            eval: self.learner.net.eval.clone(),
            ap: self.learner.ap.clone(),
            rnd: self.learner.rnd.clone(),
        });
    }

    fn maybe_checkpoint(&self) -> Result<(), RunError> {
        let interval = self.cfg.checkpoint_interval;
        if interval == 0 || self.learner.steps == 0 || self.learner.steps % interval != 0 {
            return Ok(());
        }
        let Some(dir) = &self.checkpoint_dir else {
            return Ok(());
        };
        std::fs::create_dir_all(dir)?;
        let ck = Checkpoint {
            step: self.learner.steps,
            frames: self.hub.frames.load(Ordering::SeqCst),
            net: self.learner.net.clone(),
            rnd: self.learner.rnd.clone(),
            ap: self.learner.ap.clone(),
            bandit: self.hub.bandit.lock().unwrap().clone(),
        };
        let path = dir.join(format!("checkpoint_{:08}.json", self.learner.steps));
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), &ck)?;
        Ok(())
    }

    /// One learner update if the gate and fill level allow. Returns whether
    /// a step happened.
    fn learner_tick(&mut self) -> Result<bool, RunError> {
        let bs = self.cfg.batch_size;
        if self.replay.len() < bs || !self.replay.spi_permit(bs, self.cfg.spi) {
            return Ok(false);
        }
        let Some(batch) = self
            .replay
            .sample_batch(bs, self.cfg.is_exponent, &mut self.sample_rng)
        else {
            return Ok(false);
        };
        let out = self.learner.step(&batch)?;
        self.replay.update_priorities(&batch.handles, &out.priorities);
        self.hub
            .learner_steps
            .store(self.learner.steps, Ordering::SeqCst);
        self.publish_snapshot();
        self.sigma_trace.push(out.sigmas.clone());
        if self.learner.steps % self.cfg.log_interval.max(1) == 0 {
            let mut rec = self.hub.record_base("learner");
            rec.mean_lambda = Some(out.mean_lambda);
            rec.masked_frac = Some(out.masked_frac);
            self.hub.sink.push(rec);
        }
        self.maybe_checkpoint()?;
        Ok(true)
    }

    fn run_sync(&mut self) -> Result<(), RunError> {
        let budget = self.cfg.frames;
        let mut next_eval = 0u64;
        let mut actors = std::mem::take(&mut self.actors);
        let mut evaluators = std::mem::take(&mut self.evaluators);
        let result = (|| -> Result<(), RunError> {
            'outer: while self.hub.frames.load(Ordering::SeqCst) < budget
                && !self.hub.solved.load(Ordering::SeqCst)
            {
                if self.hub.frames.load(Ordering::SeqCst) >= next_eval {
                    next_eval = next_eval.saturating_add(self.cfg.eval_interval.max(1));
                    let snap = self.register.latest();
                    let arm = self.hub.bandit.lock().unwrap().greedy();
                    for ev in evaluators.iter_mut() {
                        let (ret, _) = ev.run_episode(&snap, arm);
                        if self.hub.on_eval_episode(arm, ret) {
                            break 'outer;
                        }
                    }
                }
                for actor in actors.iter_mut() {
                    if self.hub.frames.load(Ordering::SeqCst) >= budget {
                        break;
                    }
                    let bandit = Arc::clone(&self.hub.bandit);
                    let mut select = |rng: &mut ChaCha8Rng| bandit.lock().unwrap().select(rng);
                    let report =
                        actor.step(&self.register, &self.replay, &mut select, self.intrinsic_on);
                    self.hub.frames.fetch_add(1, Ordering::SeqCst);
                    if let Some(report) = report {
                        self.hub.on_actor_episode(&report);
                    }
                }
                while self.learner_tick()? {}
            }
            Ok(())
        })();
        self.actors = actors;
        self.evaluators = evaluators;
        result
    }

    fn run_threaded(&mut self) -> Result<(), RunError> {
        let budget = self.cfg.frames;
        let stop = Arc::new(AtomicBool::new(false));
        let first_error: Arc<Mutex<Option<RunError>>> = Arc::new(Mutex::new(None));
        let actors = std::mem::take(&mut self.actors);
        let evaluators = std::mem::take(&mut self.evaluators);
        let intrinsic_on = self.intrinsic_on;

        std::thread::scope(|scope| {
            for mut actor in actors {
                let stop = Arc::clone(&stop);
                let hub = Arc::clone(&self.hub);
                let register = Arc::clone(&self.register);
                let replay = Arc::clone(&self.replay);
                scope.spawn(move || {
                    while !stop.load(Ordering::SeqCst) {
                        if hub.frames.load(Ordering::SeqCst) >= budget {
                            stop.store(true, Ordering::SeqCst);
                            break;
                        }
                        let mut select =
                            |rng: &mut ChaCha8Rng| hub.bandit.lock().unwrap().select(rng);
                        let report = actor.step(&register, &replay, &mut select, intrinsic_on);
                        hub.frames.fetch_add(1, Ordering::SeqCst);
                        if let Some(report) = report {
                            hub.on_actor_episode(&report);
                        }
                    }
                });
            }

            for mut ev in evaluators {
                let stop = Arc::clone(&stop);
                let hub = Arc::clone(&self.hub);
                let register = Arc::clone(&self.register);
                scope.spawn(move || {
                    while !stop.load(Ordering::SeqCst) {
                        let snap = register.latest();
                        let arm = hub.bandit.lock().unwrap().greedy();
                        let (ret, _) = ev.run_episode(&snap, arm);
                        if hub.on_eval_episode(arm, ret) {
                            stop.store(true, Ordering::SeqCst);
                        }
                        std::thread::sleep(std::time::Duration::from_millis(1));
                    }
                });
            }

            // learner on this thread; bounded retry with backoff on the gate
            while !stop.load(Ordering::SeqCst) {
                match self.learner_tick() {
                    Ok(true) => {}
                    Ok(false) => std::thread::sleep(std::time::Duration::from_micros(500)),
                    Err(e) => {
                        *first_error.lock().unwrap() = Some(e);
                        stop.store(true, Ordering::SeqCst);
                    }
                }
            }
        });

        let taken = first_error.lock().unwrap().take();
        match taken {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    /// Runs to the frame budget (or early solve) and returns the metrics.
    pub fn run(&mut self) -> Result<RunMetrics, RunError> {
        let mut cfg_rec = self.hub.record_base("config");
        cfg_rec.env = Some(self.cfg.env_name.clone());
        cfg_rec.seed = Some(self.cfg.seed);
        cfg_rec.frames_budget = Some(self.cfg.frames);
        self.hub.sink.push(cfg_rec);

        if self.cfg.run_mode == "sync" {
            self.run_sync()?;
        } else {
            self.run_threaded()?;
        }
        Ok(self.finalize())
    }

    fn finalize(&self) -> RunMetrics {
        let records = self.hub.sink.snapshot();
        let mut mixture_counts = vec![0u64; self.family.n];
        for r in records.iter().filter(|r| r.role == "actor") {
            if let Some(m) = r.mixture {
                mixture_counts[m] += 1;
            }
        }
        let eval_curve: Vec<(u64, f64)> = {
            let mut pts: Vec<(u64, f64)> = records
                .iter()
                .filter(|r| r.role == "evaluator")
                .filter_map(|r| r.episode_return.map(|x| (r.frames, x)))
                .collect();
            pts.sort_by_key(|p| p.0);
            pts
        };
        let frames_done = self.hub.frames.load(Ordering::SeqCst).min(self.cfg.frames);
        let auc = trapezoid_auc(&eval_curve, frames_done.max(1));
        let summary = RunSummary {
            frames: frames_done,
            learner_steps: self.learner.steps,
            episodes: self.hub.episodes.load(Ordering::SeqCst),
            best_eval_return: *self.hub.best_eval.lock().unwrap(),
            frames_to_threshold: *self.hub.frames_to_threshold.lock().unwrap(),
            auc,
            spi_ratio: self.replay.spi_ratio(),
            solved: self.hub.solved.load(Ordering::SeqCst),
        };
        let mut rec = self.hub.record_base("summary");
        rec.best_eval_return = summary.best_eval_return;
        rec.frames_to_threshold = summary.frames_to_threshold;
        rec.auc = summary.auc;
        rec.spi_ratio = Some(summary.spi_ratio);
        rec.solved = Some(summary.solved);
        self.hub.sink.push(rec);

        RunMetrics {
            records: self.hub.sink.snapshot(),
            mixture_counts,
            sigma_trace: self.sigma_trace.clone(),
            summary,
        }
    }
}

/// Convenience entry: build a trainer, run to budget, return metrics.
pub fn run(cfg: RunConfig) -> Result<RunMetrics, RunError> {
    Trainer::new(cfg)?.run()
}
