//! Cooperative navigation over a procedurally generated grid of shapes.
//!
//! Each cell optionally holds an object with a shape, color and size. Every
//! agent must reach a cell matching its goal spec. The shared reward at each
//! step is the fraction of agents currently on a matching cell.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_actions, clamp_move, Environment, StepResult, MOVE_NAMES};
use crate::error::{Error, Result};

/// Side of the square observation patch around each agent.
pub const PATCH: usize = 5;
/// `[in_bounds, occupied, circle, square, triangle, red, green, blue, small, big]`.
const CELL_FEATURES: usize = 10;
const GOAL_FEATURES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Big,
}

const SHAPES: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];
const COLORS: [Color; 3] = [Color::Red, Color::Green, Color::Blue];
const SIZES: [Size; 2] = [Size::Small, Size::Big];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Object {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
}

impl Object {
    fn features(&self) -> [f64; CELL_FEATURES] {
        let mut f = [0.0; CELL_FEATURES];
        f[0] = 1.0;
        f[1] = 1.0;
        f[2 + self.shape as usize] = 1.0;
        f[5 + self.color as usize] = 1.0;
        f[8 + self.size as usize] = 1.0;
        f
    }
}

/// Attribute constraints; unset attributes match anything. `"red"`,
/// `"blue square"` and `"small green circle"` are valid specs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoalSpec {
    pub shape: Option<Shape>,
    pub color: Option<Color>,
    pub size: Option<Size>,
}

impl GoalSpec {
    pub fn color(color: Color) -> Self {
        Self {
            color: Some(color),
            ..Self::default()
        }
    }

    pub fn matches(&self, o: &Object) -> bool {
        self.shape.map_or(true, |s| s == o.shape)
            && self.color.map_or(true, |c| c == o.color)
            && self.size.map_or(true, |s| s == o.size)
    }

    fn features(&self) -> [f64; GOAL_FEATURES] {
        let mut f = [0.0; GOAL_FEATURES];
        if let Some(s) = self.shape {
            f[s as usize] = 1.0;
        }
        if let Some(c) = self.color {
            f[3 + c as usize] = 1.0;
        }
        if let Some(s) = self.size {
            f[6 + s as usize] = 1.0;
        }
        f
    }
}

impl FromStr for GoalSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut g = GoalSpec::default();
        for word in s.split_whitespace() {
            match word.to_ascii_lowercase().as_str() {
                "circle" => g.shape = Some(Shape::Circle),
                "square" => g.shape = Some(Shape::Square),
                "triangle" => g.shape = Some(Shape::Triangle),
                "red" => g.color = Some(Color::Red),
                "green" => g.color = Some(Color::Green),
                "blue" => g.color = Some(Color::Blue),
                "small" => g.size = Some(Size::Small),
                "big" => g.size = Some(Size::Big),
                other => return Err(Error::Config(format!("unknown goal attribute `{other}`"))),
            }
        }
        if g == GoalSpec::default() {
            return Err(Error::Config(format!("empty goal spec `{s}`")));
        }
        Ok(g)
    }
}

impl fmt::Display for GoalSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut words = Vec::new();
        if let Some(s) = self.size {
            words.push(format!("{s:?}").to_lowercase());
        }
        if let Some(c) = self.color {
            words.push(format!("{c:?}").to_lowercase());
        }
        if let Some(s) = self.shape {
            words.push(format!("{s:?}").to_lowercase());
        }
        f.write_str(&words.join(" "))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapesConfig {
    pub size: usize,
    pub agents: usize,
    pub max_steps: usize,
    /// Probability that a cell holds an object.
    pub density: f64,
    /// One spec shared by all agents, or one per agent.
    pub goals: Vec<GoalSpec>,
    /// End the episode as soon as every agent is on its goal. When off the
    /// episode runs to the horizon and succeeds if that ever happened.
    #[serde(default = "default_true")]
    pub stop_when_solved: bool,
}

fn default_true() -> bool {
    true
}

impl ShapesConfig {
    pub fn default_horizon(size: usize) -> usize {
        2 * size
    }
}

impl Default for ShapesConfig {
    fn default() -> Self {
        Self {
            size: 30,
            agents: 4,
            max_steps: Self::default_horizon(30),
            density: 0.2,
            goals: vec![GoalSpec::color(Color::Red)],
            stop_when_solved: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ShapesEnv {
    cfg: ShapesConfig,
    cells: Vec<Option<Object>>,
    agents: Vec<(usize, usize)>,
    t: usize,
    done: bool,
    solved: bool,
    rng: ChaCha8Rng,
}

impl ShapesEnv {
    pub fn new(cfg: ShapesConfig) -> Result<Self> {
        if cfg.size < 2 || cfg.agents == 0 || cfg.max_steps == 0 {
            return Err(Error::Config("shapes needs size ≥ 2, ≥ 1 agent and a positive horizon".into()));
        }
        if !(0.0..=1.0).contains(&cfg.density) {
            return Err(Error::Config(format!("density {} outside [0, 1]", cfg.density)));
        }
        if cfg.goals.len() != 1 && cfg.goals.len() != cfg.agents {
            return Err(Error::Config(format!(
                "{} goals for {} agents; give one shared goal or one per agent",
                cfg.goals.len(),
                cfg.agents
            )));
        }
        let n = cfg.size * cfg.size;
        let agents = vec![(0, 0); cfg.agents];
        Ok(Self {
            cfg,
            cells: vec![None; n],
            agents,
            t: 0,
            done: false,
            solved: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        })
    }

    pub fn config(&self) -> &ShapesConfig {
        &self.cfg
    }

    pub fn goal(&self, agent: usize) -> GoalSpec {
        if self.cfg.goals.len() == 1 {
            self.cfg.goals[0]
        } else {
            self.cfg.goals[agent]
        }
    }

    pub fn cell(&self, x: usize, y: usize) -> Option<Object> {
        self.cells[y * self.cfg.size + x]
    }

    pub fn set_cell(&mut self, x: usize, y: usize, object: Option<Object>) {
        self.cells[y * self.cfg.size + x] = object;
    }

    pub fn set_agent(&mut self, agent: usize, pos: (usize, usize)) {
        self.agents[agent] = pos;
    }

    pub fn on_goal(&self, agent: usize) -> bool {
        let (x, y) = self.agents[agent];
        self.cell(x, y).is_some_and(|o| self.goal(agent).matches(&o))
    }

    fn random_object(&mut self) -> Object {
        Object {
            shape: SHAPES[self.rng.gen_range(0..3)],
            color: COLORS[self.rng.gen_range(0..3)],
            size: SIZES[self.rng.gen_range(0..2)],
        }
    }

    fn observe(&self, agent: usize) -> Vec<f64> {
        let size = self.cfg.size as isize;
        let (ax, ay) = self.agents[agent];
        let half = (PATCH / 2) as isize;
        let mut obs = Vec::with_capacity(self.observation_size());
        for dy in -half..=half {
            for dx in -half..=half {
                let (x, y) = (ax as isize + dx, ay as isize + dy);
                if x < 0 || y < 0 || x >= size || y >= size {
                    obs.extend_from_slice(&[0.0; CELL_FEATURES]);
                    continue;
                }
                match self.cell(x as usize, y as usize) {
                    Some(o) => obs.extend_from_slice(&o.features()),
                    None => {
                        let mut f = [0.0; CELL_FEATURES];
                        f[0] = 1.0;
                        obs.extend_from_slice(&f);
                    }
                }
            }
        }
        let denom = (self.cfg.size - 1) as f64;
        obs.push(ax as f64 / denom);
        obs.push(ay as f64 / denom);
        obs.extend_from_slice(&self.goal(agent).features());
        obs
    }
}

impl Environment for ShapesEnv {
    fn name(&self) -> &str {
        "shapes"
    }

    fn agent_count(&self) -> usize {
        self.cfg.agents
    }

    fn action_count(&self) -> usize {
        5
    }

    fn action_names(&self) -> &'static [&'static str] {
        &MOVE_NAMES
    }

    fn observation_size(&self) -> usize {
        PATCH * PATCH * CELL_FEATURES + 2 + GOAL_FEATURES
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
        self.t = 0;
        self.done = false;
        self.solved = false;
        let n = self.cfg.size * self.cfg.size;
        for i in 0..n {
            self.cells[i] = if self.rng.gen::<f64>() < self.cfg.density {
                Some(self.random_object())
            } else {
                None
            };
        }
        // every goal must be reachable somewhere on the grid
        let goals = self.cfg.goals.clone();
        for goal in goals {
            if !self.cells.iter().flatten().any(|o| goal.matches(o)) {
                let mut o = self.random_object();
                o.shape = goal.shape.unwrap_or(o.shape);
                o.color = goal.color.unwrap_or(o.color);
                o.size = goal.size.unwrap_or(o.size);
                let i = self.rng.gen_range(0..n);
                self.cells[i] = Some(o);
            }
        }
        let empty: Vec<usize> = (0..n).filter(|&i| self.cells[i].is_none()).collect();
        for a in 0..self.cfg.agents {
            let i = if empty.is_empty() {
                self.rng.gen_range(0..n)
            } else {
                empty[self.rng.gen_range(0..empty.len())]
            };
            self.agents[a] = (i % self.cfg.size, i / self.cfg.size);
        }
        self.observations()
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepResult> {
        check_actions(actions, self.cfg.agents, 5)?;
        if self.done {
            return Err(Error::Contract("step after episode end; call reset".into()));
        }
        for (pos, &a) in self.agents.iter_mut().zip(actions) {
            *pos = clamp_move(*pos, a, self.cfg.size, self.cfg.size);
        }
        self.t += 1;
        let on_goal = (0..self.cfg.agents).filter(|&i| self.on_goal(i)).count();
        let reward = on_goal as f64 / self.cfg.agents as f64;
        let all = on_goal == self.cfg.agents;
        self.solved |= all;
        self.done = (all && self.cfg.stop_when_solved) || self.t >= self.cfg.max_steps;
        Ok(StepResult {
            rewards: vec![reward; self.cfg.agents],
            team_reward: reward,
            done: self.done,
            success: self.solved,
            spawned: vec![false; self.cfg.agents],
            collisions: 0,
        })
    }

    fn observations(&self) -> Vec<Vec<f64>> {
        (0..self.cfg.agents).map(|a| self.observe(a)).collect()
    }

    fn alive(&self) -> Vec<bool> {
        vec![true; self.cfg.agents]
    }

    fn positions(&self) -> Vec<Option<(usize, usize)>> {
        self.agents.iter().map(|&p| Some(p)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{LEFT, STAY};

    fn small(agents: usize) -> ShapesEnv {
        let mut env = ShapesEnv::new(ShapesConfig {
            size: 8,
            agents,
            max_steps: 10,
            density: 0.0,
            goals: vec![GoalSpec::color(Color::Red)],
            stop_when_solved: true,
        })
        .unwrap();
        env.reset(1);
        for y in 0..8 {
            for x in 0..8 {
                env.set_cell(x, y, None);
            }
        }
        env
    }

    const RED: Object = Object {
        shape: Shape::Circle,
        color: Color::Red,
        size: Size::Big,
    };

    #[test]
    fn half_on_goal_gives_half_reward() {
        let mut env = small(4);
        env.set_cell(1, 1, Some(RED));
        env.set_cell(5, 5, Some(RED));
        env.set_agent(0, (1, 1));
        env.set_agent(1, (5, 5));
        env.set_agent(2, (3, 3));
        env.set_agent(3, (6, 2));
        let r = env.step(&[STAY; 4]).unwrap();
        assert_eq!(r.team_reward, 0.5);
        assert!(!r.done);
    }

    #[test]
    fn nobody_on_goal_gives_zero() {
        let mut env = small(2);
        env.set_agent(0, (0, 0));
        env.set_agent(1, (7, 7));
        assert_eq!(env.step(&[STAY; 2]).unwrap().team_reward, 0.0);
    }

    #[test]
    fn left_edge_blocks_left_move() {
        let mut env = small(1);
        env.set_agent(0, (0, 4));
        env.step(&[LEFT]).unwrap();
        assert_eq!(env.positions()[0], Some((0, 4)));
    }

    #[test]
    fn everyone_on_goal_ends_with_success() {
        let mut env = small(2);
        env.set_cell(2, 2, Some(RED));
        env.set_agent(0, (2, 2));
        env.set_agent(1, (2, 2));
        let r = env.step(&[STAY; 2]).unwrap();
        assert!(r.done && r.success);
        assert_eq!(r.team_reward, 1.0);
        assert!(env.step(&[STAY; 2]).is_err());
    }

    #[test]
    fn running_to_the_horizon_remembers_success() {
        let mut env = small(2);
        env.cfg.stop_when_solved = false;
        env.set_cell(2, 2, Some(RED));
        env.set_agent(0, (2, 2));
        env.set_agent(1, (2, 2));
        let r = env.step(&[STAY; 2]).unwrap();
        assert!(!r.done && r.success);
        // leaving the goal afterwards does not undo the success
        let mut last = env.step(&[LEFT, STAY]).unwrap();
        assert_eq!(last.team_reward, 0.5);
        while !last.done {
            last = env.step(&[STAY; 2]).unwrap();
        }
        assert!(last.success);
        assert_eq!(env.steps_taken(), 10);
    }

    #[test]
    fn goal_always_present_and_agents_spawn_on_empty_cells() {
        let mut env = ShapesEnv::new(ShapesConfig {
            size: 6,
            density: 0.05,
            goals: vec!["small green circle".parse().unwrap()],
            ..ShapesConfig::default()
        })
        .unwrap();
        for seed in 0..50 {
            env.reset(seed);
            let goal = env.goal(0);
            assert!(env.cells.iter().flatten().any(|o| goal.matches(o)));
            for (x, y) in env.agents.clone() {
                assert!(env.cell(x, y).is_none());
            }
        }
    }

    #[test]
    fn goal_spec_parsing() {
        let g: GoalSpec = "blue square".parse().unwrap();
        assert_eq!(g.color, Some(Color::Blue));
        assert_eq!(g.shape, Some(Shape::Square));
        assert_eq!(g.size, None);
        assert_eq!(g.to_string(), "blue square");
        assert!("purple".parse::<GoalSpec>().is_err());
        assert!("".parse::<GoalSpec>().is_err());
    }

    #[test]
    fn observation_layout() {
        let mut env = small(1);
        env.set_agent(0, (0, 0));
        env.set_cell(1, 0, Some(RED));
        let obs = env.observations().remove(0);
        assert_eq!(obs.len(), env.observation_size());
        // patch (dx=-2..2, dy=-2..2); own cell is index 12, right neighbour 13
        assert_eq!(obs[12 * CELL_FEATURES], 1.0);
        assert_eq!(obs[12 * CELL_FEATURES + 1], 0.0);
        assert_eq!(&obs[13 * CELL_FEATURES..14 * CELL_FEATURES], &RED.features());
        // top-left corner of the patch is off the grid
        assert_eq!(obs[0], 0.0);
        // red goal one-hot
        assert_eq!(obs[obs.len() - GOAL_FEATURES + 3], 1.0);
    }

    #[test]
    fn wrong_goal_count_rejected() {
        let cfg = ShapesConfig {
            goals: vec![GoalSpec::color(Color::Red), GoalSpec::color(Color::Blue)],
            ..ShapesConfig::default()
        };
        assert!(ShapesEnv::new(cfg).is_err());
    }
}
