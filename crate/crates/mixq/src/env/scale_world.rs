//! Wrapper multiplying rewards by a constant; dynamics untouched. Exists to
//! exercise learning under extreme reward scales.

use super::{Environment, StepOutcome};

pub struct ScaleWorld {
    base: Box<dyn Environment>,
    scale: f64,
}

impl ScaleWorld {
    pub fn new(base: Box<dyn Environment>, scale: f64) -> Self {
        assert!(scale.is_finite() && scale != 0.0);
        ScaleWorld { base, scale }
    }
}

impl Environment for ScaleWorld {
    fn observation_dim(&self) -> usize {
        self.base.observation_dim()
    }

    fn num_actions(&self) -> usize {
        self.base.num_actions()
    }

    fn horizon(&self) -> usize {
        self.base.horizon()
    }

    fn reset(&mut self) -> Vec<f64> {
        self.base.reset()
    }

    fn step(&mut self, action: usize) -> StepOutcome {
        let mut out = self.base.step(action);
        out.reward *= self.scale;
        out
    }
}
