//! Dense-reward navigation grid: every step pays the negative normalized
//! Manhattan distance to the goal, stepping onto the goal pays +1 and ends
//! the episode, and the horizon is 4n.

use super::{Environment, StepOutcome};

pub struct DenseGrid {
    n: usize,
    start: (usize, usize),
    goal: (usize, usize),
    pos: (usize, usize),
    steps: usize,
    active: bool,
}

impl DenseGrid {
    pub fn new(n: usize, _seed: u64) -> Self {
        assert!(n >= 2);
        DenseGrid {
            n,
            start: (0, 0),
            goal: (n - 1, n - 1),
            pos: (0, 0),
            steps: 0,
            active: false,
        }
    }

    /// Custom start cell, for tests and oracles.
    pub fn with_start(mut self, row: usize, col: usize) -> Self {
        assert!(row < self.n && col < self.n);
        self.start = (row, col);
        self
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn goal(&self) -> (usize, usize) {
        self.goal
    }

    fn manhattan(&self, p: (usize, usize)) -> usize {
        p.0.abs_diff(self.goal.0) + p.1.abs_diff(self.goal.1)
    }

    fn shaped_reward(&self, p: (usize, usize)) -> f64 {
        -(self.manhattan(p) as f64) / (2.0 * (self.n as f64 - 1.0))
    }

    fn observation(&self) -> Vec<f64> {
        let mut obs = vec![0.0; self.n * self.n];
        obs[self.pos.0 * self.n + self.pos.1] = 1.0;
        obs
    }

    fn moved(&self, p: (usize, usize), action: usize) -> (usize, usize) {
        let (r, c) = p;
        match action {
            0 => (r.saturating_sub(1), c),                 // up
            1 => ((r + 1).min(self.n - 1), c),             // down
            2 => (r, c.saturating_sub(1)),                 // left
            3 => (r, (c + 1).min(self.n - 1)),             // right
            _ => panic!("action out of range"),
        }
    }

    /// Optimal undiscounted return from the start, by value iteration over
    /// the deterministic finite-horizon problem.
    pub fn optimal_return(&self) -> f64 {
        let n = self.n;
        let horizon = self.horizon();
        // v[t][state]: best return-to-go with t steps taken already
        let mut v = vec![vec![0.0f64; n * n]; horizon + 1];
        for t in (0..horizon).rev() {
            for r in 0..n {
                for c in 0..n {
                    if (r, c) == self.goal {
                        continue; // absorbing
                    }
                    let mut best = f64::NEG_INFINITY;
                    for a in 0..4 {
                        let np = self.moved((r, c), a);
                        let val = if np == self.goal {
                            1.0
                        } else {
                            self.shaped_reward(np) + v[t + 1][np.0 * n + np.1]
                        };
                        best = best.max(val);
                    }
                    v[t][r * n + c] = best;
                }
            }
        }
        v[0][self.start.0 * n + self.start.1]
    }
}

impl Environment for DenseGrid {
    fn observation_dim(&self) -> usize {
        self.n * self.n
    }

    fn num_actions(&self) -> usize {
        4
    }

    fn horizon(&self) -> usize {
        4 * self.n
    }

    fn reset(&mut self) -> Vec<f64> {
        self.pos = self.start;
        self.steps = 0;
        self.active = true;
        self.observation()
    }

    fn step(&mut self, action: usize) -> StepOutcome {
        assert!(self.active, "step called before reset or after episode end");
        self.pos = self.moved(self.pos, action);
        self.steps += 1;
        let reached = self.pos == self.goal;
        let reward = if reached { 1.0 } else { self.shaped_reward(self.pos) };
        let done = reached || self.steps >= self.horizon();
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn goal_adjacent_step_pays_one_and_terminates() {
        let mut env = DenseGrid::new(4, 0).with_start(3, 2);
        env.reset();
        let out = env.step(3); // right, into the goal
        assert_eq!(out.reward, 1.0);
        assert!(out.done);
    }

    #[test]
    fn horizon_exhaustion_ends_without_bonus() {
        let mut env = DenseGrid::new(3, 0);
        env.reset();
        let mut last = None;
        for _ in 0..env.horizon() {
            let out = env.step(0); // bang into the top wall forever
            last = Some(out.clone());
            if out.done {
                break;
            }
        }
        let last = last.unwrap();
        assert!(last.done);
        assert!(last.reward < 0.0);
    }

    #[test]
    fn greedy_shortest_path_matches_value_iteration() {
        // The shaped reward is monotone in distance, so the shortest path is
        // optimal; its return must match the value-iteration value.
        for n in [2usize, 4, 6, 8] {
            let mut env = DenseGrid::new(n, 0);
            let optimal = env.optimal_return();
            env.reset();
            let mut total = 0.0;
            loop {
                // walk right first, then down
                let a = if env.pos.1 < n - 1 { 3 } else { 1 };
                let out = env.step(a);
                total += out.reward;
                if out.done {
                    break;
                }
            }
            assert!(
                (total - optimal).abs() < 1e-9,
                "n={n}: rollout {total} vs VI {optimal}"
            );
        }
    }
}
