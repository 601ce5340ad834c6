//! Partially observable gridworlds behind one multi-agent contract.
//!
//! Each environment exposes a fixed number of agent slots. Slots may be
//! inactive (traffic cars that have not spawned or have left the grid);
//! inactive slots report zero observations and `alive = false`.

mod prey;
mod shapes;
mod traffic;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use prey::{PreyConfig, PreyEnv};
pub use shapes::{Color, GoalSpec, Object, Shape, ShapesConfig, ShapesEnv, Size};
pub use traffic::{Car, Difficulty, RoadMap, Route, TrafficConfig, TrafficEnv, BRAKE, GAS};

/// Grid movement actions shared by SHAPES and predator-prey.
pub const UP: usize = 0;
pub const DOWN: usize = 1;
pub const LEFT: usize = 2;
pub const RIGHT: usize = 3;
pub const STAY: usize = 4;
pub const MOVE_NAMES: [&str; 5] = ["up", "down", "left", "right", "stay"];

pub const ENV_NAMES: [&str; 6] = [
    "shapes",
    "traffic-easy",
    "traffic-hard",
    "prey-small",
    "prey-medium",
    "prey-large",
];

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    /// Per-slot reward; zero for inactive slots.
    pub rewards: Vec<f64>,
    /// Team reward shared by all agents.
    pub team_reward: f64,
    pub done: bool,
    /// Meaningful once `done` is set.
    pub success: bool,
    /// Slots that became active during this step (fresh hidden state needed).
    pub spawned: Vec<bool>,
    pub collisions: usize,
}

pub trait Environment: Send {
    fn name(&self) -> &str;
    fn agent_count(&self) -> usize;
    fn action_count(&self) -> usize;
    fn action_names(&self) -> &'static [&'static str];
    fn observation_size(&self) -> usize;
    /// `(width, height)`.
    fn grid(&self) -> (usize, usize);
    fn max_steps(&self) -> usize;
    fn steps_taken(&self) -> usize;

    fn reset(&mut self, seed: u64) -> Vec<Vec<f64>>;
    /// Applies one joint action. Actions of inactive slots are ignored.
    fn step(&mut self, actions: &[usize]) -> Result<StepResult>;

    fn observations(&self) -> Vec<Vec<f64>>;
    fn alive(&self) -> Vec<bool>;
    /// `(x, y)` of every active slot.
    fn positions(&self) -> Vec<Option<(usize, usize)>>;

    /// Arrival-rate hook for curricula; no-op for environments without spawning.
    fn set_arrival_rate(&mut self, _rate: f64) {}
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvOverrides {
    pub grid: Option<usize>,
    pub agents: Option<usize>,
    pub horizon: Option<usize>,
    pub vision: Option<usize>,
    pub arrival_rate: Option<f64>,
    pub density: Option<f64>,
    pub goals: Option<Vec<String>>,
    /// SHAPES only; see [`ShapesConfig::stop_when_solved`].
    pub stop_when_solved: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    #[serde(default)]
    pub overrides: EnvOverrides,
}

impl EnvSpec {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            overrides: EnvOverrides::default(),
        }
    }

    pub fn with(mut self, overrides: EnvOverrides) -> Self {
        self.overrides = overrides;
        self
    }

    pub fn build(&self) -> Result<Box<dyn Environment>> {
        make_env(&self.name, &self.overrides)
    }
}

pub fn make_env(name: &str, o: &EnvOverrides) -> Result<Box<dyn Environment>> {
    match name {
        "shapes" => {
            let mut cfg = ShapesConfig::default();
            if let Some(g) = o.grid {
                cfg.size = g;
                cfg.max_steps = ShapesConfig::default_horizon(g);
            }
            if let Some(n) = o.agents {
                cfg.agents = n;
            }
            if let Some(h) = o.horizon {
                cfg.max_steps = h;
            }
            if let Some(d) = o.density {
                cfg.density = d;
            }
            if let Some(goals) = &o.goals {
                cfg.goals = goals.iter().map(|g| g.parse()).collect::<Result<_>>()?;
            }
            if let Some(stop) = o.stop_when_solved {
                cfg.stop_when_solved = stop;
            }
            if o.vision.is_some() || o.arrival_rate.is_some() {
                return Err(Error::Config("shapes has no vision or arrival-rate settings".into()));
            }
            Ok(Box::new(ShapesEnv::new(cfg)?))
        }
        "traffic-easy" | "traffic-hard" => {
            let mut cfg = if name == "traffic-easy" {
                TrafficConfig::easy()
            } else {
                TrafficConfig::hard()
            };
            if let Some(g) = o.grid {
                cfg.size = g;
            }
            if let Some(n) = o.agents {
                cfg.max_cars = n;
            }
            if let Some(h) = o.horizon {
                cfg.max_steps = h;
            }
            if let Some(p) = o.arrival_rate {
                cfg.arrival_rate = p;
            }
            if o.vision.is_some() || o.goals.is_some() || o.density.is_some() || o.stop_when_solved.is_some() {
                return Err(Error::Config("traffic supports grid, agents, horizon and arrival_rate".into()));
            }
            Ok(Box::new(TrafficEnv::new(cfg)?))
        }
        "prey-small" | "prey-medium" | "prey-large" => {
            let mut cfg = match name {
                "prey-small" => PreyConfig::small(),
                "prey-medium" => PreyConfig::medium(),
                _ => PreyConfig::large(),
            };
            if let Some(g) = o.grid {
                cfg.size = g;
            }
            if let Some(n) = o.agents {
                cfg.predators = n;
            }
            if let Some(h) = o.horizon {
                cfg.max_steps = h;
            }
            if let Some(v) = o.vision {
                cfg.vision = v;
            }
            if o.arrival_rate.is_some() || o.goals.is_some() || o.density.is_some() || o.stop_when_solved.is_some() {
                return Err(Error::Config("predator-prey supports grid, agents, horizon and vision".into()));
            }
            Ok(Box::new(PreyEnv::new(cfg)?))
        }
        other => Err(Error::UnknownEnv(other.to_string())),
    }
}

/// Moves `(x, y)` one cell, clamped to a `width × height` grid.
pub(crate) fn clamp_move(pos: (usize, usize), action: usize, width: usize, height: usize) -> (usize, usize) {
    let (x, y) = pos;
    match action {
        UP => (x, y.saturating_sub(1)),
        DOWN => (x, (y + 1).min(height - 1)),
        LEFT => (x.saturating_sub(1), y),
        RIGHT => ((x + 1).min(width - 1), y),
        _ => (x, y),
    }
}

pub(crate) fn check_actions(actions: &[usize], agents: usize, action_count: usize) -> Result<()> {
    if actions.len() != agents {
        return Err(Error::Contract(format!(
            "expected {agents} actions, got {}",
            actions.len()
        )));
    }
    if let Some(a) = actions.iter().find(|&&a| a >= action_count) {
        return Err(Error::Contract(format!("action {a} out of range 0..{action_count}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_name_is_rejected() {
        assert!(matches!(make_env("house3d", &EnvOverrides::default()), Err(Error::UnknownEnv(_))));
    }

    #[test]
    fn every_named_env_builds_and_resets() {
        for name in ENV_NAMES {
            let mut env = make_env(name, &EnvOverrides::default()).unwrap();
            let obs = env.reset(3);
            assert_eq!(obs.len(), env.agent_count());
            assert!(obs.iter().all(|o| o.len() == env.observation_size()));
        }
    }

    #[test]
    fn shapes_grid_override() {
        let env = make_env("shapes", &EnvOverrides { grid: Some(15), ..Default::default() }).unwrap();
        assert_eq!(env.grid(), (15, 15));
    }

    #[test]
    fn mismatched_override_rejected() {
        let o = EnvOverrides { vision: Some(1), ..Default::default() };
        assert!(make_env("traffic-easy", &o).is_err());
    }

    #[test]
    fn clamping_at_walls() {
        assert_eq!(clamp_move((0, 2), LEFT, 5, 5), (0, 2));
        assert_eq!(clamp_move((4, 4), DOWN, 5, 5), (4, 4));
        assert_eq!(clamp_move((2, 0), UP, 5, 5), (2, 0));
        assert_eq!(clamp_move((2, 2), RIGHT, 5, 5), (3, 2));
        assert_eq!(clamp_move((2, 2), STAY, 5, 5), (2, 2));
    }
}
