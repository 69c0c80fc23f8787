//! Toy environments exercising hard exploration, sparse rewards and extreme
//! reward scales, plus the environment interface and registry.

mod deep_sea;
mod dense_grid;
mod scale_world;

pub use deep_sea::DeepSea;
pub use dense_grid::DenseGrid;
pub use scale_world::ScaleWorld;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("unknown environment: {0}")]
    Unknown(String),
    #[error("bad environment parameter: {0}")]
    BadParam(String),
}

/// One transition's outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// Flat-observation episodic environment. Deterministic given its seed;
/// episodes terminate within a stated horizon. `step` before `reset`, or
/// after `done` without a reset, is a caller bug and panics.
pub trait Environment: Send {
    fn observation_dim(&self) -> usize;
    fn num_actions(&self) -> usize;
    /// Upper bound on episode length.
    fn horizon(&self) -> usize;
    fn reset(&mut self) -> Vec<f64>;
    fn step(&mut self, action: usize) -> StepOutcome;
}

/// Builds an environment from a registry name and parameters.
pub fn make(
    name: &str,
    size: usize,
    scale: f64,
    seed: u64,
) -> Result<Box<dyn Environment>, EnvError> {
    if size < 2 {
        return Err(EnvError::BadParam(format!("size must be >= 2, got {size}")));
    }
    let base: Box<dyn Environment> = match name {
        "deep_sea" => Box::new(DeepSea::new(size, seed)),
        "dense_grid" => Box::new(DenseGrid::new(size, seed)),
        other => return Err(EnvError::Unknown(other.to_string())),
    };
    if scale == 1.0 {
        Ok(base)
    } else {
        Ok(Box::new(ScaleWorld::new(base, scale)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// API conformance: reset-before-step discipline, reward finiteness,
    /// done within horizon, stable observation dimension.
    fn conformance(mut env: Box<dyn Environment>, seed: u64) {
        let dim = env.observation_dim();
        let acts = env.num_actions();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..5 {
            let obs = env.reset();
            assert_eq!(obs.len(), dim);
            let mut steps = 0;
            loop {
                let out = env.step(rng.gen_range(0..acts));
                steps += 1;
                assert_eq!(out.observation.len(), dim);
                assert!(out.reward.is_finite());
                assert!(steps <= env.horizon(), "episode exceeded horizon");
                if out.done {
                    break;
                }
            }
        }
    }

    #[test]
    fn all_registered_envs_conform() {
        for name in ["deep_sea", "dense_grid"] {
            for size in [2, 3, 8] {
                conformance(make(name, size, 1.0, 7).unwrap(), 13);
            }
        }
        conformance(make("deep_sea", 4, 1e-3, 7).unwrap(), 13);
    }

    #[test]
    fn registry_rejects_unknown() {
        let err = match make("atari", 8, 1.0, 0) {
            Err(e) => e,
            Ok(_) => panic!("expected error"),
        };
        assert_eq!(err, EnvError::Unknown("atari".into()));
        assert!(matches!(
            make("deep_sea", 1, 1.0, 0).map(|_| ()),
            Err(EnvError::BadParam(_))
        ));
    }

    #[test]
    #[should_panic(expected = "reset")]
    fn step_before_reset_panics() {
        let mut env = DeepSea::new(4, 0);
        env.step(0);
    }
}
