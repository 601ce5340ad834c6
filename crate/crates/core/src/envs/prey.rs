//! Predators search a grid for a stationary prey.
//!
//! Predators that reach the prey stay on its cell for the rest of the episode
//! and keep collecting the on-prey reward; they still take part in
//! communication.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_actions, clamp_move, Environment, StepResult, MOVE_NAMES};
use crate::error::{Error, Result};

pub const EXPLORE_REWARD: f64 = -0.05;
pub const PREY_REWARD: f64 = 0.05;
/// `[in_bounds, prey, other predator]`.
const CELL_FEATURES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreyConfig {
    pub size: usize,
    pub predators: usize,
    pub vision: usize,
    pub max_steps: usize,
}

impl PreyConfig {
    pub fn small() -> Self {
        Self { size: 5, predators: 3, vision: 0, max_steps: 20 }
    }

    pub fn medium() -> Self {
        Self { size: 10, predators: 5, vision: 1, max_steps: 40 }
    }

    pub fn large() -> Self {
        Self { size: 20, predators: 10, vision: 1, max_steps: 80 }
    }
}

#[derive(Clone, Debug)]
pub struct PreyEnv {
    cfg: PreyConfig,
    predators: Vec<(usize, usize)>,
    reached: Vec<bool>,
    prey: (usize, usize),
    t: usize,
    done: bool,
    rng: ChaCha8Rng,
}

impl PreyEnv {
    pub fn new(cfg: PreyConfig) -> Result<Self> {
        if cfg.size < 2 || cfg.predators == 0 || cfg.max_steps == 0 {
            return Err(Error::Config("prey needs size ≥ 2, ≥ 1 predator and a positive horizon".into()));
        }
        let n = cfg.predators;
        Ok(Self {
            cfg,
            predators: vec![(0, 0); n],
            reached: vec![false; n],
            prey: (0, 0),
            t: 0,
            done: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        })
    }

    pub fn config(&self) -> &PreyConfig {
        &self.cfg
    }

    pub fn prey(&self) -> (usize, usize) {
        self.prey
    }

    pub fn reached(&self) -> &[bool] {
        &self.reached
    }

    /// Scripted placement for tests and demos.
    pub fn place(&mut self, prey: (usize, usize), predators: &[(usize, usize)]) {
        self.prey = prey;
        self.predators.copy_from_slice(predators);
        self.reached.iter_mut().for_each(|r| *r = false);
        self.t = 0;
        self.done = false;
    }

    fn window(&self) -> usize {
        2 * self.cfg.vision + 1
    }

    fn observe(&self, agent: usize) -> Vec<f64> {
        let n = self.cfg.size;
        let v = self.cfg.vision as isize;
        let (ax, ay) = self.predators[agent];
        let mut obs = Vec::with_capacity(self.observation_size());
        for dy in -v..=v {
            for dx in -v..=v {
                let (x, y) = (ax as isize + dx, ay as isize + dy);
                if x < 0 || y < 0 || x >= n as isize || y >= n as isize {
                    obs.extend_from_slice(&[0.0; CELL_FEATURES]);
                    continue;
                }
                let cell = (x as usize, y as usize);
                let other = self
                    .predators
                    .iter()
                    .enumerate()
                    .any(|(j, &p)| j != agent && p == cell);
                obs.push(1.0);
                obs.push(f64::from(u8::from(cell == self.prey)));
                obs.push(f64::from(u8::from(other)));
            }
        }
        let mut coords = vec![0.0; 2 * n];
        coords[ax] = 1.0;
        coords[n + ay] = 1.0;
        obs.extend(coords);
        obs.push(f64::from(u8::from(self.reached[agent])));
        obs
    }
}

impl Environment for PreyEnv {
    fn name(&self) -> &str {
        "prey"
    }

    fn agent_count(&self) -> usize {
        self.cfg.predators
    }

    fn action_count(&self) -> usize {
        5
    }

    fn action_names(&self) -> &'static [&'static str] {
        &MOVE_NAMES
    }

    fn observation_size(&self) -> usize {
        self.window() * self.window() * CELL_FEATURES + 2 * self.cfg.size + 1
    }

    fn grid(&self) -> (usize, usize) {
        (self.cfg.size, self.cfg.size)
    }

    fn max_steps(&self) -> usize {
        self.cfg.max_steps
    }

    fn steps_taken(&self) -> usize {
        self.t
    }

    fn reset(&mut self, seed: u64) -> Vec<Vec<f64>> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        let cells = self.cfg.size * self.cfg.size;
        let p = self.rng.gen_range(0..cells);
        self.prey = (p % self.cfg.size, p / self.cfg.size);
        for i in 0..self.cfg.predators {
            // never start on the prey
            let mut c = self.rng.gen_range(0..cells - 1);
            if c >= p {
                c += 1;
            }
            self.predators[i] = (c % self.cfg.size, c / self.cfg.size);
        }
        self.reached.iter_mut().for_each(|r| *r = false);
        self.t = 0;
        self.done = false;
        self.observations()
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepResult> {
        check_actions(actions, self.cfg.predators, 5)?;
        if self.done {
            return Err(Error::Contract("step after episode end; call reset".into()));
        }
        let n = self.cfg.size;
        for i in 0..self.cfg.predators {
            if !self.reached[i] {
                self.predators[i] = clamp_move(self.predators[i], actions[i], n, n);
                self.reached[i] = self.predators[i] == self.prey;
            }
        }
        self.t += 1;
        let rewards: Vec<f64> = self
            .reached
            .iter()
            .map(|&r| if r { PREY_REWARD } else { EXPLORE_REWARD })
            .collect();
        let all = self.reached.iter().all(|&r| r);
        self.done = all || self.t >= self.cfg.max_steps;
        Ok(StepResult {
            team_reward: rewards.iter().sum(),
            rewards,
            done: self.done,
            success: all,
            spawned: vec![false; self.cfg.predators],
            collisions: 0,
        })
    }

    fn observations(&self) -> Vec<Vec<f64>> {
        (0..self.cfg.predators).map(|a| self.observe(a)).collect()
    }

    fn alive(&self) -> Vec<bool> {
        vec![true; self.cfg.predators]
    }

    fn positions(&self) -> Vec<Option<(usize, usize)>> {
        self.predators.iter().map(|&p| Some(p)).collect()
    }
}
