//! Hard-exploration diving grid.
//!
//! An n×n grid descended one row per step from the top-left. Each cell
//! randomly permutes which of the two actions means "right", so no constant
//! action works. Moving right costs `0.01/n`; the single +1 reward sits at
//! the bottom-right and is reachable only by moving right every step. A
//! greedy agent learns to avoid the cost and never finds the treasure,
//! which is the trap this environment exists to pose.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Environment, StepOutcome};

pub struct DeepSea {
    n: usize,
    /// right_action[row * n + col]: which action index means "move right".
    right_action: Vec<usize>,
    row: usize,
    col: usize,
    active: bool,
}

impl DeepSea {
    pub fn new(n: usize, seed: u64) -> Self {
        assert!(n >= 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let right_action = (0..n * n).map(|_| rng.gen_range(0..2usize)).collect();
        DeepSea {
            n,
            right_action,
            row: 0,
            col: 0,
            active: false,
        }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    /// The action that means "move right" in the current cell; the optimal
    /// policy plays this everywhere. Exposed for oracles and tests.
    pub fn optimal_action(&self) -> usize {
        self.right_action[self.row * self.n + self.col]
    }

    /// Undiscounted return of the always-right policy: `1 - n (0.01 / n)`.
    pub fn optimal_return(&self) -> f64 {
        1.0 - 0.01
    }

    fn observation(&self) -> Vec<f64> {
        let mut obs = vec![0.0; self.n * self.n];
        if self.row < self.n {
            obs[self.row * self.n + self.col] = 1.0;
        }
        obs
    }
}

impl Environment for DeepSea {
    fn observation_dim(&self) -> usize {
        self.n * self.n
    }

    fn num_actions(&self) -> usize {
        2
    }

    fn horizon(&self) -> usize {
        self.n
    }

    fn reset(&mut self) -> Vec<f64> {
        self.row = 0;
        self.col = 0;
        self.active = true;
        self.observation()
    }

    fn step(&mut self, action: usize) -> StepOutcome {
        assert!(self.active, "step called before reset or after episode end");
        assert!(action < 2, "action out of range");
        let goes_right = action == self.right_action[self.row * self.n + self.col];
        let mut reward = 0.0;
        if goes_right {
            reward -= 0.01 / self.n as f64;
            // treasure: at the last row, in the last column, moving right
            if self.row == self.n - 1 && self.col == self.n - 1 {
                reward += 1.0;
            }
            self.col = (self.col + 1).min(self.n - 1);
        } else {
            self.col = self.col.saturating_sub(1);
        }
        self.row += 1;
        let done = self.row == self.n;
        if done {
            self.active = false;
        }
        StepOutcome {
            observation: self.observation(),
            reward,
            done,
        }
    }
}
