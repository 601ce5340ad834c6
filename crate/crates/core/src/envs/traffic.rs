//! Traffic junction: cars follow fixed routes and choose gas or brake each step.
//!
//! Step order: move every active car, age active cars, detect collisions,
//! compute per-car rewards, then spawn new cars at free entry cells.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_actions, Environment, StepResult};
use crate::error::{Error, Result};

pub const GAS: usize = 0;
pub const BRAKE: usize = 1;
const ACTION_NAMES: [&str; 2] = ["gas", "brake"];

pub const TIME_PENALTY: f64 = -0.01;
pub const COLLISION_PENALTY: f64 = -10.0;

const NORTH: u8 = 1;
const EAST: u8 = 2;
const SOUTH: u8 = 4;
const WEST: u8 = 8;
const DIRS: [u8; 4] = [NORTH, EAST, SOUTH, WEST];

fn delta(dir: u8) -> (isize, isize) {
    match dir {
        NORTH => (0, -1),
        EAST => (1, 0),
        SOUTH => (0, 1),
        _ => (-1, 0),
    }
}

fn opposite(dir: u8) -> u8 {
    match dir {
        NORTH => SOUTH,
        EAST => WEST,
        SOUTH => NORTH,
        _ => EAST,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    /// One junction of two one-way roads.
    Easy,
    /// Four junctions of two-way roads.
    Hard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrafficConfig {
    pub difficulty: Difficulty,
    pub size: usize,
    pub max_cars: usize,
    pub arrival_rate: f64,
    pub max_steps: usize,
}

impl TrafficConfig {
    pub fn easy() -> Self {
        Self {
            difficulty: Difficulty::Easy,
            size: 7,
            max_cars: 5,
            arrival_rate: 0.30,
            max_steps: 20,
        }
    }

    pub fn hard() -> Self {
        Self {
            difficulty: Difficulty::Hard,
            size: 18,
            max_cars: 20,
            arrival_rate: 0.05,
            max_steps: 40,
        }
    }
}

/// Directed lane graph: each road cell stores the bitset of directions cars
/// may travel out of it.
#[derive(Clone, Debug, PartialEq)]
pub struct RoadMap {
    size: usize,
    dirs: Vec<u8>,
}

impl RoadMap {
    pub fn build(difficulty: Difficulty, size: usize) -> Result<Self> {
        let mut dirs = vec![0u8; size * size];
        let row = |y: usize, d: u8, dirs: &mut Vec<u8>| {
            for x in 0..size {
                dirs[y * size + x] |= d;
            }
        };
        match difficulty {
            Difficulty::Easy => {
                if size < 3 {
                    return Err(Error::Config("easy traffic needs a grid of at least 3".into()));
                }
                let c = size / 2;
                row(c, EAST, &mut dirs);
                for y in 0..size {
                    dirs[y * size + c] |= SOUTH;
                }
            }
            Difficulty::Hard => {
                if size < 8 {
                    return Err(Error::Config("hard traffic needs a grid of at least 8".into()));
                }
                // right-hand traffic: each road is a pair of opposite lanes
                for a in [size / 3, 2 * size / 3] {
                    row(a - 1, WEST, &mut dirs);
                    row(a, EAST, &mut dirs);
                    for y in 0..size {
                        dirs[y * size + a - 1] |= SOUTH;
                        dirs[y * size + a] |= NORTH;
                    }
                }
            }
        }
        Ok(Self { size, dirs })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn is_road(&self, x: usize, y: usize) -> bool {
        self.dirs[y * self.size + x] != 0
    }

    fn step(&self, (x, y): (usize, usize), dir: u8) -> Option<(usize, usize)> {
        let (dx, dy) = delta(dir);
        let (nx, ny) = (x as isize + dx, y as isize + dy);
        let n = self.size as isize;
        (nx >= 0 && ny >= 0 && nx < n && ny < n).then_some((nx as usize, ny as usize))
    }

    fn out_dirs(&self, (x, y): (usize, usize)) -> impl Iterator<Item = u8> + '_ {
        let bits = self.dirs[y * self.size + x];
        DIRS.into_iter().filter(move |d| bits & d != 0)
    }

    /// Entry cells with the direction cars enter along.
    fn entries(&self) -> Vec<((usize, usize), u8)> {
        let mut out = Vec::new();
        for y in 0..self.size {
            for x in 0..self.size {
                for d in self.out_dirs((x, y)) {
                    if self.step((x, y), opposite(d)).is_none() {
                        out.push(((x, y), d));
                    }
                }
            }
        }
        out
    }

    /// Shortest lane-respecting path from every entry to every exit on a
    /// different side of the grid.
    pub fn routes(&self) -> Vec<Route> {
        let mut routes = Vec::new();
        for (entry_id, (start, in_dir)) in self.entries().into_iter().enumerate() {
            let n = self.size * self.size;
            let idx = |(x, y): (usize, usize)| y * self.size + x;
            let mut prev: Vec<Option<usize>> = vec![None; n];
            let mut seen = vec![false; n];
            let mut order = Vec::new();
            let mut queue = VecDeque::from([start]);
            seen[idx(start)] = true;
            while let Some(cell) = queue.pop_front() {
                order.push(cell);
                for d in self.out_dirs(cell) {
                    let Some(next) = self.step(cell, d) else { continue };
                    if seen[idx(next)] || self.dirs[idx(next)] & d == 0 {
                        continue;
                    }
                    seen[idx(next)] = true;
                    prev[idx(next)] = Some(idx(cell));
                    queue.push_back(next);
                }
            }
            for cell in order {
                for d in self.out_dirs(cell) {
                    if self.step(cell, d).is_some() || d == opposite(in_dir) {
                        continue;
                    }
                    let mut path = vec![cell];
                    let mut at = idx(cell);
                    while let Some(p) = prev[at] {
                        path.push((p % self.size, p / self.size));
                        at = p;
                    }
                    path.reverse();
                    routes.push(Route { entry: entry_id, cells: path });
                }
            }
        }
        routes
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Route {
    pub entry: usize,
    pub cells: Vec<(usize, usize)>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Car {
    pub active: bool,
    pub route: usize,
    /// Position along the route.
    pub index: usize,
    /// Steps since spawning.
    pub tau: usize,
}

#[derive(Clone, Debug)]
pub struct TrafficEnv {
    cfg: TrafficConfig,
    road: RoadMap,
    routes: Vec<Route>,
    /// Route ids grouped by entry.
    by_entry: Vec<Vec<usize>>,
    cars: Vec<Car>,
    t: usize,
    done: bool,
    collided: bool,
    rng: ChaCha8Rng,
}

impl TrafficEnv {
    pub fn new(cfg: TrafficConfig) -> Result<Self> {
        if cfg.max_cars == 0 || cfg.max_steps == 0 {
            return Err(Error::Config("traffic needs ≥ 1 car slot and a positive horizon".into()));
        }
        if !(0.0..=1.0).contains(&cfg.arrival_rate) {
            return Err(Error::Config(format!("arrival rate {} outside [0, 1]", cfg.arrival_rate)));
        }
        let road = RoadMap::build(cfg.difficulty, cfg.size)?;
        let routes = road.routes();
        let entries = routes.iter().map(|r| r.entry).max().map_or(0, |e| e + 1);
        let mut by_entry = vec![Vec::new(); entries];
        for (i, r) in routes.iter().enumerate() {
            by_entry[r.entry].push(i);
        }
        let cars = vec![Car::default(); cfg.max_cars];
        Ok(Self {
            cfg,
            road,
            routes,
            by_entry,
            cars,
            t: 0,
            done: false,
            collided: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        })
    }

    pub fn config(&self) -> &TrafficConfig {
        &self.cfg
    }

    pub fn road(&self) -> &RoadMap {
        &self.road
    }

    pub fn routes(&self) -> &[Route] {
        &self.routes
    }

    pub fn cars(&self) -> &[Car] {
        &self.cars
    }

    /// Overwrites a slot; for scripted scenarios.
    pub fn set_car(&mut self, slot: usize, car: Car) {
        self.cars[slot] = car;
    }

    pub fn car_position(&self, slot: usize) -> Option<(usize, usize)> {
        let c = self.cars[slot];
        c.active.then(|| self.routes[c.route].cells[c.index])
    }

    pub fn active_count(&self) -> usize {
        self.cars.iter().filter(|c| c.active).count()
    }

    /// Whether any collision has happened this episode.
    pub fn collided(&self) -> bool {
        self.collided
    }

    fn spawn(&mut self) -> Vec<bool> {
        let mut spawned = vec![false; self.cfg.max_cars];
        for entry in 0..self.by_entry.len() {
            if self.rng.gen::<f64>() >= self.cfg.arrival_rate {
                continue;
            }
            let choices = &self.by_entry[entry];
            let route = choices[self.rng.gen_range(0..choices.len())];
            let start = self.routes[route].cells[0];
            let occupied = (0..self.cfg.max_cars).any(|s| self.car_position(s) == Some(start));
            let Some(slot) = self.cars.iter().position(|c| !c.active) else { continue };
            if occupied {
                continue;
            }
            self.cars[slot] = Car { active: true, route, index: 0, tau: 0 };
            spawned[slot] = true;
        }
        spawned
    }

    fn observe(&self, slot: usize) -> Vec<f64> {
        let mut obs = vec![0.0; self.observation_size()];
        let Some((x, y)) = self.car_position(slot) else { return obs };
        let car = self.cars[slot];
        let n = self.cfg.size as isize;
        let others: Vec<(usize, usize)> = (0..self.cfg.max_cars)
            .filter(|&s| s != slot)
            .filter_map(|s| self.car_position(s))
            .collect();
        let mut k = 0;
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                let (cx, cy) = (x as isize + dx, y as isize + dy);
                if cx >= 0 && cy >= 0 && cx < n && cy < n {
                    let cell = (cx as usize, cy as usize);
                    obs[k] = f64::from(u8::from(self.road.is_road(cell.0, cell.1)));
                    obs[k + 1] = f64::from(u8::from(others.contains(&cell)));
                }
                k += 2;
            }
        }
        obs[k + car.route] = 1.0;
        k += self.routes.len();
        let denom = (self.cfg.size - 1) as f64;
        obs[k] = x as f64 / denom;
        obs[k + 1] = y as f64 / denom;
        obs[k + 2] = car.index as f64 / self.routes[car.route].cells.len() as f64;
        obs[k + 3] = car.tau as f64 / self.cfg.max_steps as f64;
        obs
    }
}

impl Environment for TrafficEnv {
    fn name(&self) -> &str {
        match self.cfg.difficulty {
            Difficulty::Easy => "traffic-easy",
            Difficulty::Hard => "traffic-hard",
        }
    }

    fn agent_count(&self) -> usize {
        self.cfg.max_cars
    }

    fn action_count(&self) -> usize {
        2
    }

    fn action_names(&self) -> &'static [&'static str] {
        &ACTION_NAMES
    }

    fn observation_size(&self) -> usize {
        9 * 2 + self.routes.len() + 4
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
        self.cars.iter_mut().for_each(|c| *c = Car::default());
        self.t = 0;
        self.done = false;
        self.collided = false;
        self.spawn();
        self.observations()
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepResult> {
        check_actions(actions, self.cfg.max_cars, 2)?;
        if self.done {
            return Err(Error::Contract("step after episode end; call reset".into()));
        }
        let n = self.cfg.max_cars;
        let before: Vec<Option<(usize, usize)>> = (0..n).map(|s| self.car_position(s)).collect();
        for (car, &a) in self.cars.iter_mut().zip(actions) {
            if !car.active || a != GAS {
                continue;
            }
            car.index += 1;
            if car.index == self.routes[car.route].cells.len() {
                *car = Car::default();
            }
        }
        for car in self.cars.iter_mut().filter(|c| c.active) {
            car.tau += 1;
        }
        let after: Vec<Option<(usize, usize)>> = (0..n).map(|s| self.car_position(s)).collect();
        let mut hit = vec![false; n];
        for i in 0..n {
            let Some(pi) = after[i] else { continue };
            for j in i + 1..n {
                let Some(pj) = after[j] else { continue };
                let same = pi == pj;
                let swap = before[i] == Some(pj) && before[j] == Some(pi) && pi != pj;
                if same || swap {
                    hit[i] = true;
                    hit[j] = true;
                }
            }
        }
        let mut rewards = vec![0.0; n];
        for (s, car) in self.cars.iter().enumerate() {
            if car.active {
                rewards[s] = TIME_PENALTY * car.tau as f64 + if hit[s] { COLLISION_PENALTY } else { 0.0 };
            }
        }
        let collisions = hit.iter().filter(|&&h| h).count();
        self.collided |= collisions > 0;
        let spawned = self.spawn();
        self.t += 1;
        self.done = self.t >= self.cfg.max_steps;
        Ok(StepResult {
            team_reward: rewards.iter().sum(),
            rewards,
            done: self.done,
            success: !self.collided,
            spawned,
            collisions,
        })
    }

    fn observations(&self) -> Vec<Vec<f64>> {
        (0..self.cfg.max_cars).map(|s| self.observe(s)).collect()
    }

    fn alive(&self) -> Vec<bool> {
        self.cars.iter().map(|c| c.active).collect()
    }

    fn positions(&self) -> Vec<Option<(usize, usize)>> {
        (0..self.cfg.max_cars).map(|s| self.car_position(s)).collect()
    }

    fn set_arrival_rate(&mut self, rate: f64) {
        self.cfg.arrival_rate = rate.clamp(0.0, 1.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet_easy() -> TrafficEnv {
        let mut env = TrafficEnv::new(TrafficConfig { arrival_rate: 0.0, ..TrafficConfig::easy() }).unwrap();
        env.reset(0);
        env
    }

    fn route_with(env: &TrafficEnv, first: (usize, usize), last: (usize, usize)) -> usize {
        env.routes()
            .iter()
            .position(|r| r.cells[0] == first && *r.cells.last().unwrap() == last)
            .unwrap()
    }

    #[test]
    fn easy_has_four_turning_routes() {
        let env = quiet_easy();
        assert_eq!(env.routes().len(), 4);
        let straight = &env.routes()[route_with(&env, (0, 3), (6, 3))];
        assert_eq!(straight.cells.len(), 7);
        let turn = &env.routes()[route_with(&env, (0, 3), (3, 6))];
        assert_eq!(turn.cells, vec![(0, 3), (1, 3), (2, 3), (3, 3), (3, 4), (3, 5), (3, 6)]);
    }

    #[test]
    fn hard_routes_follow_lanes_and_change_sides() {
        let env = TrafficEnv::new(TrafficConfig::hard()).unwrap();
        // 8 entries, each reaching 6 exits on the other three sides
        assert_eq!(env.routes().len(), 48);
        for r in env.routes() {
            for w in r.cells.windows(2) {
                let d = w[0].0.abs_diff(w[1].0) + w[0].1.abs_diff(w[1].1);
                assert_eq!(d, 1);
                assert!(env.road().is_road(w[1].0, w[1].1));
            }
        }
    }

    #[test]
    fn time_penalty_without_collision() {
        let mut env = quiet_easy();
        let r = route_with(&env, (0, 3), (6, 3));
        env.set_car(0, Car { active: true, route: r, index: 1, tau: 4 });
        let out = env.step(&[GAS, BRAKE, BRAKE, BRAKE, BRAKE]).unwrap();
        assert!((out.rewards[0] - (-0.05)).abs() < 1e-12);
        assert_eq!(out.collisions, 0);
    }

    #[test]
    fn shared_cell_costs_both_cars() {
        let mut env = quiet_easy();
        let we = route_with(&env, (0, 3), (6, 3));
        let ns = route_with(&env, (3, 0), (3, 6));
        // both one cell away from the junction
        env.set_car(0, Car { active: true, route: we, index: 2, tau: 0 });
        env.set_car(1, Car { active: true, route: ns, index: 2, tau: 0 });
        let out = env.step(&[GAS, GAS, BRAKE, BRAKE, BRAKE]).unwrap();
        assert_eq!(env.car_position(0), Some((3, 3)));
        assert_eq!(env.car_position(1), Some((3, 3)));
        assert!((out.rewards[0] - (-10.01)).abs() < 1e-12);
        assert!((out.rewards[1] - (-10.01)).abs() < 1e-12);
        assert_eq!(out.collisions, 2);
        assert!(env.collided());
    }

    #[test]
    fn brake_holds_position() {
        let mut env = quiet_easy();
        env.set_car(2, Car { active: true, route: 0, index: 3, tau: 1 });
        let before = env.car_position(2);
        env.step(&[BRAKE; 5]).unwrap();
        assert_eq!(env.car_position(2), before);
        assert_eq!(env.cars()[2].tau, 2);
    }

    #[test]
    fn finishing_a_route_frees_the_slot() {
        let mut env = quiet_easy();
        let r = route_with(&env, (0, 3), (6, 3));
        env.set_car(0, Car { active: true, route: r, index: 6, tau: 6 });
        let out = env.step(&[GAS, BRAKE, BRAKE, BRAKE, BRAKE]).unwrap();
        assert!(!env.alive()[0]);
        assert_eq!(out.rewards[0], 0.0);
        assert!(env.observations()[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spawning_respects_capacity() {
        let mut env = TrafficEnv::new(TrafficConfig { arrival_rate: 1.0, ..TrafficConfig::easy() }).unwrap();
        env.reset(5);
        for _ in 0..20 {
            let out = env.step(&[GAS; 5]).unwrap();
            assert!(env.active_count() <= 5);
            for (s, &sp) in out.spawned.iter().enumerate() {
                if sp {
                    assert_eq!(env.cars()[s].index, 0);
                    assert_eq!(env.cars()[s].tau, 0);
                }
            }
        }
    }

    #[test]
    fn success_flag_tracks_collisions() {
        let mut env = quiet_easy();
        for _ in 0..19 {
            assert!(!env.step(&[GAS; 5]).unwrap().done);
        }
        let last = env.step(&[GAS; 5]).unwrap();
        assert!(last.done && last.success);
    }
}
