//! Batched synchronous actor-critic with a centralized critic.
//!
//! Each iteration unrolls `batch` environments for `rollout_len` steps on a
//! single tape, then forms
//!
//! ```text
//! actor  = −mean_{t,b,i alive} [log π(a_i^t) · Q̂_t] − β · mean H(π)
//! critic = mean_t (y_t − Q̂_t)²,   y_t = r_t + γ · Q̂_{t+1} (0 past a terminal)
//! ```
//!
//! The critic reads detached hidden states, and the actor treats `Q̂` as a
//! constant, so neither loss reaches the other network's parameters.
//! Gradients flow back through time within a segment and through the
//! communication channel into the senders.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{argmax, critic_calls, sample_action, CriticNet, ModelConfig, PolicyNet, PolicyOutput};
use crate::analysis::AttentionRecord;
use crate::autodiff::{sigmoid, Tape, Unary, Var};
use crate::comm::{CommConfig, Layout};
use crate::envs::{EnvSpec, Environment};
use crate::error::{Error, Result};
use crate::nn::{init_params, Bindings, ParamStore, RmsProp};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// Per-agent rewards summed into one team reward and one critic output.
    Team,
    /// One critic output and one return per agent.
    PerAgent,
}

/// Per-agent weight on `log π(a)` in the actor loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Advantage {
    /// `Q̂(h, a)`.
    Q,
    /// `Q̂(h, a) − V̂(h)`.
    QMinusValue,
    /// `y_t − V̂(h)` with the critic's TD target `y_t`.
    TdError,
    /// `G_t − V̂(h)` where `G_t` is the discounted return to the end of the
    /// segment, bootstrapped there; `V̂` regresses on `G_t`.
    Return,
}

impl Advantage {
    pub fn needs_baseline(self) -> bool {
        self != Advantage::Q
    }
}

/// Linear ramp of the traffic arrival rate over training episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curriculum {
    pub start_rate: f64,
    pub end_rate: f64,
    pub start_episode: u64,
    pub end_episode: u64,
}

impl Curriculum {
    pub fn rate(&self, episodes: u64) -> f64 {
        if episodes <= self.start_episode || self.end_episode <= self.start_episode {
            return if episodes >= self.end_episode { self.end_rate } else { self.start_rate };
        }
        let f = ((episodes - self.start_episode) as f64 / (self.end_episode - self.start_episode) as f64).min(1.0);
        self.start_rate + f * (self.end_rate - self.start_rate)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub rmsprop_alpha: f64,
    pub rmsprop_eps: f64,
    pub batch: usize,
    pub gamma: f64,
    pub entropy_coef: f64,
    pub value_loss_coef: f64,
    pub rollout_len: usize,
    /// Training stops once this many episodes have finished.
    pub episodes: u64,
    pub seed: u64,
    pub hidden: usize,
    pub critic_hidden: usize,
    pub reward_mode: RewardMode,
    pub advantage: Advantage,
    pub grad_clip: Option<f64>,
    pub curriculum: Option<Curriculum>,
    /// Iterations per metrics row.
    pub log_interval: usize,
    /// Every k-th episode has its attention logged.
    pub attention_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 7e-4,
            rmsprop_alpha: 0.99,
            rmsprop_eps: 1e-5,
            batch: 16,
            gamma: 0.99,
            entropy_coef: 0.01,
            value_loss_coef: 0.5,
            rollout_len: 20,
            episodes: 10_000,
            seed: 0,
            hidden: 128,
            critic_hidden: 128,
            reward_mode: RewardMode::Team,
            advantage: Advantage::Return,
            grad_clip: None,
            curriculum: None,
            log_interval: 10,
            attention_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad("lr must be a finite non-negative number");
        }
        if !(0.0..1.0).contains(&self.rmsprop_alpha) || self.rmsprop_eps <= 0.0 {
            return bad("rmsprop alpha must lie in [0, 1) and eps must be positive");
        }
        if self.batch == 0 || self.rollout_len == 0 || self.log_interval == 0 || self.attention_every == 0 {
            return bad("batch, rollout_len, log_interval and attention_every must be positive");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if self.entropy_coef < 0.0 || self.value_loss_coef < 0.0 {
            return bad("loss coefficients must be non-negative");
        }
        if self.hidden == 0 || self.critic_hidden == 0 {
            return bad("hidden sizes must be positive");
        }
        if let Some(c) = self.grad_clip {
            if c <= 0.0 {
                return bad("grad_clip must be positive");
            }
        }
        Ok(())
    }

    pub fn optimizer(&self) -> RmsProp {
        RmsProp {
            lr: self.lr,
            alpha: self.rmsprop_alpha,
            eps: self.rmsprop_eps,
        }
    }
}

/// Network shapes implied by an environment, a training config and a
/// communication config.
pub fn model_config(env: &dyn Environment, train: &TrainConfig, comm: &CommConfig) -> ModelConfig {
    ModelConfig {
        obs_dim: env.observation_size(),
        actions: env.action_count(),
        agents: env.agent_count(),
        hidden: train.hidden,
        critic_hidden: train.critic_hidden,
        per_agent_values: train.reward_mode == RewardMode::PerAgent,
        value_baseline: train.advantage.needs_baseline(),
        comm: comm.clone(),
    }
}

/// One recorded timestep for a whole batch. Rows are `batch · agents`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepData {
    /// `rows × obs_dim`, row-major.
    pub obs: Vec<f64>,
    /// Whether each row carries its hidden state and incoming message over
    /// from the previous step (false at episode starts and fresh spawns).
    pub keep: Vec<bool>,
    pub alive: Vec<bool>,
    pub actions: Vec<usize>,
    /// Gate bits; all open when gating is off.
    pub gates: Vec<bool>,
    pub rewards: Vec<f64>,
    /// Per environment.
    pub team_rewards: Vec<f64>,
    /// Per environment.
    pub done: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub layout: Layout,
    pub obs_dim: usize,
    /// Hidden state and incoming message entering the first step.
    pub h0: Vec<f64>,
    pub c0: Vec<f64>,
    pub steps: Vec<StepData>,
    /// `Q̂` after the final step, `batch × critic outputs`; ignored where the
    /// final step is terminal.
    pub bootstrap: Vec<f64>,
}

/// `y_t = r_t + γ · (1 − done_t) · next_t` for one value stream.
pub fn td_targets(rewards: &[f64], next_values: &[f64], done: &[bool], gamma: f64) -> Vec<f64> {
    rewards
        .iter()
        .zip(next_values)
        .zip(done)
        .map(|((&r, &q), &d)| if d { r } else { r + gamma * q })
        .collect()
}

/// `G_t = r_t + γ · (1 − done_t) · G_{t+1}` with `G_T = bootstrap`.
pub fn discounted_returns(rewards: &[f64], bootstrap: f64, done: &[bool], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut g = bootstrap;
    for t in (0..rewards.len()).rev() {
        g = if done[t] { rewards[t] } else { rewards[t] + gamma * g };
        out[t] = g;
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub actor: f64,
    pub critic: f64,
    /// Mean policy entropy over alive agents.
    pub entropy: f64,
}

/// Loss nodes on the tape plus their values.
#[derive(Clone, Copy, Debug)]
pub struct Losses {
    pub total: Var,
    pub actor: Var,
    /// Weighted by `value_loss_coef`.
    pub critic: Var,
    pub values: LossValues,
}

/// Differentiable per-step quantities collected during an unroll.
#[derive(Clone, Debug)]
pub struct StepVars {
    pub hidden: Var,
    pub log_pi: Var,
    pub entropy: Var,
    pub gate_log_pi: Option<Var>,
}

fn row_mask<F: Scalar>(keep: &[bool], cols: usize) -> Tensor<F> {
    let data = keep
        .iter()
        .flat_map(|&k| std::iter::repeat(if k { F::one() } else { F::zero() }).take(cols))
        .collect();
    Tensor::new(vec![keep.len(), cols], data).expect("mask shape")
}

fn bool_vec<F: Scalar>(v: &[bool]) -> Tensor<F> {
    Tensor::vector(v.iter().map(|&b| if b { F::one() } else { F::zero() }).collect())
}

/// Policy forward for one step, with hidden state and message reset on rows
/// that do not carry over.
#[allow(clippy::too_many_arguments)]
fn policy_step<F: Scalar>(
    tape: &mut Tape<F>,
    binds: &Bindings,
    policy: &PolicyNet,
    obs: &[f64],
    obs_dim: usize,
    keep: &[bool],
    h_prev: Var,
    c_prev: Var,
) -> Result<PolicyOutput> {
    let rows = keep.len();
    let obs = tape.constant(Tensor::new(vec![rows, obs_dim], obs.iter().map(|&v| F::of(v)).collect())?);
    let (h, c) = if keep.iter().all(|&k| k) {
        (h_prev, c_prev)
    } else {
        let hm = row_mask::<F>(keep, tape.value(h_prev).cols());
        let cm = row_mask::<F>(keep, tape.value(c_prev).cols());
        (tape.mul_const(h_prev, &hm)?, tape.mul_const(c_prev, &cm)?)
    };
    policy.forward(tape, binds, obs, c, h)
}

/// Log-probabilities of the chosen actions and gates, and row entropies.
fn step_terms<F: Scalar>(tape: &mut Tape<F>, out: &PolicyOutput, actions: &[usize], gates: &[bool]) -> Result<StepVars> {
    let log_pi = tape.gather(out.log_probs, actions)?;
    let p = tape.unary(Unary::Exp, out.log_probs)?;
    let plogp = tape.mul(p, out.log_probs)?;
    let neg_h = tape.row_sum(plogp);
    let entropy = tape.affine(neg_h, -F::one(), F::zero());
    let gate_log_pi = match out.gate_logits {
        Some(g) => {
            let rows = gates.len();
            let g = tape.reshape(g, vec![rows])?;
            let sign = Tensor::vector(gates.iter().map(|&o| if o { F::one() } else { -F::one() }).collect());
            let z = tape.mul_const(g, &sign)?;
            Some(tape.unary(Unary::LogSigmoid, z)?)
        }
        None => None,
    };
    Ok(StepVars {
        hidden: out.hidden,
        log_pi,
        entropy,
        gate_log_pi,
    })
}

fn masked_actions(actions: &[usize], alive: &[bool]) -> Vec<Option<usize>> {
    actions.iter().zip(alive).map(|(&a, &l)| l.then_some(a)).collect()
}

/// Values the losses treat as constants: per-row actor weights (minus the
/// advantage) and per-stream regression targets for `Q̂` and `V̂`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossConstants {
    pub weights: Vec<Vec<f64>>,
    /// Weights for gate log-probabilities. Opening a gate only affects
    /// teammates, so with per-agent values these are the environment's
    /// summed advantage; with a team value they equal `weights`.
    pub gate_weights: Vec<Vec<f64>>,
    pub q_targets: Vec<Vec<f64>>,
    pub v_targets: Vec<Vec<f64>>,
}

/// Computes [`LossConstants`] from the current critic on detached hidden
/// states.
pub fn loss_constants<F: Scalar>(
    tape: &mut Tape<F>,
    binds: &Bindings,
    critic: &CriticNet,
    traj: &Trajectory,
    vars: &[StepVars],
    cfg: &TrainConfig,
) -> Result<LossConstants> {
    let Layout { batch, agents } = traj.layout;
    let rows = batch * agents;
    let per_agent = cfg.reward_mode == RewardMode::PerAgent;
    let outputs = if per_agent { agents } else { 1 };
    let horizon = traj.steps.len();
    if cfg.advantage.needs_baseline() != critic.has_baseline() {
        return Err(Error::Config("advantage mode and critic baseline disagree".into()));
    }
    let mut q_vals: Vec<Vec<f64>> = Vec::with_capacity(horizon);
    let mut v_vals: Vec<Vec<f64>> = Vec::new();
    for (s, v) in traj.steps.iter().zip(vars) {
        let h = tape.detach(v.hidden);
        let q = critic.forward(tape, binds, h, &masked_actions(&s.actions, &s.alive))?;
        q_vals.push(tape.value(q).to_f64());
        if critic.has_baseline() {
            let b = critic.value(tape, binds, h)?;
            v_vals.push(tape.value(b).to_f64());
        }
    }

    let mut q_targets = vec![vec![0.0; batch * outputs]; horizon];
    let mut returns = vec![vec![0.0; batch * outputs]; horizon];
    for b in 0..batch {
        for k in 0..outputs {
            let col = b * outputs + k;
            let rewards: Vec<f64> = traj
                .steps
                .iter()
                .map(|s| if per_agent { s.rewards[b * agents + k] } else { s.team_rewards[b] })
                .collect();
            let next: Vec<f64> = (0..horizon)
                .map(|t| if t + 1 < horizon { q_vals[t + 1][col] } else { traj.bootstrap[col] })
                .collect();
            let done: Vec<bool> = traj.steps.iter().map(|s| s.done[b]).collect();
            for (t, y) in td_targets(&rewards, &next, &done, cfg.gamma).into_iter().enumerate() {
                q_targets[t][col] = y;
            }
            for (t, g) in discounted_returns(&rewards, traj.bootstrap[col], &done, cfg.gamma).into_iter().enumerate() {
                returns[t][col] = g;
            }
        }
    }

    let mut weights = vec![vec![0.0; rows]; horizon];
    for (t, s) in traj.steps.iter().enumerate() {
        for r in 0..rows {
            if s.alive[r] {
                let (b, i) = (r / agents, r % agents);
                let col = if per_agent { b * agents + i } else { b };
                let adv = match cfg.advantage {
                    Advantage::Q => q_vals[t][col],
                    Advantage::QMinusValue => q_vals[t][col] - v_vals[t][col],
                    Advantage::TdError => q_targets[t][col] - v_vals[t][col],
                    Advantage::Return => returns[t][col] - v_vals[t][col],
                };
                weights[t][r] = -adv;
            }
        }
    }
    let gate_weights = if per_agent {
        weights
            .iter()
            .zip(&traj.steps)
            .map(|(w, s)| {
                (0..rows)
                    .map(|r| {
                        let b = r / agents;
                        if s.alive[r] { w[b * agents..(b + 1) * agents].iter().sum() } else { 0.0 }
                    })
                    .collect()
            })
            .collect()
    } else {
        weights.clone()
    };
    let v_targets = match cfg.advantage {
        Advantage::Q => Vec::new(),
        Advantage::Return => returns,
        _ => q_targets.clone(),
    };
    Ok(LossConstants {
        weights,
        gate_weights,
        q_targets,
        v_targets,
    })
}

/// Builds the actor and critic losses for an unrolled trajectory.
pub fn assemble_loss<F: Scalar>(
    tape: &mut Tape<F>,
    binds: &Bindings,
    critic: &CriticNet,
    traj: &Trajectory,
    vars: &[StepVars],
    cfg: &TrainConfig,
) -> Result<Losses> {
    let consts = loss_constants(tape, binds, critic, traj, vars, cfg)?;
    surrogate_loss(tape, binds, critic, traj, vars, cfg, &consts)
}

/// The losses whose gradient is the update direction, with `consts` held
/// fixed.
pub fn surrogate_loss<F: Scalar>(
    tape: &mut Tape<F>,
    binds: &Bindings,
    critic: &CriticNet,
    traj: &Trajectory,
    vars: &[StepVars],
    cfg: &TrainConfig,
    consts: &LossConstants,
) -> Result<Losses> {
    let Layout { batch, agents } = traj.layout;
    let per_agent = cfg.reward_mode == RewardMode::PerAgent;
    let outputs = if per_agent { agents } else { 1 };
    let horizon = traj.steps.len();
    if horizon == 0 || vars.len() != horizon {
        return Err(Error::Contract("loss needs one step record per trajectory step".into()));
    }

    let alive_count: usize = traj.steps.iter().map(|s| s.alive.iter().filter(|&&a| a).count()).sum();
    let alive_count = alive_count.max(1) as f64;
    let critic_count = if per_agent { alive_count } else { (horizon * batch) as f64 };

    let mut actor_terms = Vec::new();
    let mut ent_terms = Vec::new();
    let mut critic_terms = Vec::new();
    for t in 0..horizon {
        let s = &traj.steps[t];
        let v = &vars[t];
        let w = Tensor::vector(consts.weights[t].iter().map(|&w| F::of(w)).collect());
        let a = tape.mul_const(v.log_pi, &w)?;
        actor_terms.push(tape.sum(a));
        if let Some(g) = v.gate_log_pi {
            let gw = Tensor::vector(consts.gate_weights[t].iter().map(|&w| F::of(w)).collect());
            let ga = tape.mul_const(g, &gw)?;
            actor_terms.push(tape.sum(ga));
        }
        let e = tape.mul_const(v.entropy, &bool_vec(&s.alive))?;
        ent_terms.push(tape.sum(e));

        let h = tape.detach(v.hidden);
        let neg = |ys: &[f64]| Tensor::new(vec![batch, outputs], ys.iter().map(|&y| F::of(-y)).collect());
        let q = critic.forward(tape, binds, h, &masked_actions(&s.actions, &s.alive))?;
        let diff = tape.add_const(q, &neg(&consts.q_targets[t])?)?;
        let mut sq = tape.unary(Unary::Square, diff)?;
        if critic.has_baseline() {
            let b = critic.value(tape, binds, h)?;
            let vdiff = tape.add_const(b, &neg(&consts.v_targets[t])?)?;
            let vsq = tape.unary(Unary::Square, vdiff)?;
            sq = tape.add(sq, vsq)?;
        }
        let sq = if per_agent {
            let m = Tensor::new(vec![batch, outputs], s.alive.iter().map(|&a| if a { F::one() } else { F::zero() }).collect())?;
            tape.mul_const(sq, &m)?
        } else {
            sq
        };
        critic_terms.push(tape.sum(sq));
    }
    let sum_all = |tape: &mut Tape<F>, terms: &[Var]| -> Result<Var> {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = tape.add(acc, t)?;
        }
        Ok(acc)
    };
    let actor_sum = sum_all(tape, &actor_terms)?;
    let ent_sum = sum_all(tape, &ent_terms)?;
    let critic_sum = sum_all(tape, &critic_terms)?;
    let pg = tape.affine(actor_sum, F::of(1.0 / alive_count), F::zero());
    let ent = tape.affine(ent_sum, F::of(-cfg.entropy_coef / alive_count), F::zero());
    let actor = tape.add(pg, ent)?;
    let critic_loss = tape.affine(critic_sum, F::of(cfg.value_loss_coef / critic_count), F::zero());
    let total = tape.add(actor, critic_loss)?;
    let values = LossValues {
        total: tape.value(total).item()?.as_f64(),
        actor: tape.value(actor).item()?.as_f64(),
        critic: tape.value(critic_sum).item()?.as_f64() / critic_count,
        entropy: tape.value(ent_sum).item()?.as_f64() / alive_count,
    };
    Ok(Losses {
        total,
        actor,
        critic: critic_loss,
        values,
    })
}

/// Replays a recorded trajectory with its recorded actions and gates and
/// builds the full loss on `tape`.
pub fn trajectory_loss<F: Scalar>(
    tape: &mut Tape<F>,
    binds: &Bindings,
    policy: &PolicyNet,
    critic: &CriticNet,
    traj: &Trajectory,
    cfg: &TrainConfig,
) -> Result<Losses> {
    let vars = replay(tape, binds, policy, traj)?;
    assemble_loss(tape, binds, critic, traj, &vars, cfg)
}

/// Replays `traj` and returns the per-step terms without building losses.
pub fn replay<F: Scalar>(
    tape: &mut Tape<F>,
    binds: &Bindings,
    policy: &PolicyNet,
    traj: &Trajectory,
) -> Result<Vec<StepVars>> {
    let rows = traj.layout.rows();
    let mc = policy.config();
    let mut h = tape.constant(Tensor::new(vec![rows, mc.hidden], traj.h0.iter().map(|&v| F::of(v)).collect())?);
    let mut c = tape.constant(Tensor::new(
        vec![rows, mc.comm.value_dim],
        traj.c0.iter().map(|&v| F::of(v)).collect(),
    )?);
    let mut vars = Vec::with_capacity(traj.steps.len());
    for s in &traj.steps {
        let out = policy_step(tape, binds, policy, &s.obs, traj.obs_dim, &s.keep, h, c)?;
        vars.push(step_terms(tape, &out, &s.actions, &s.gates)?);
        let senders: Vec<bool> = s.alive.iter().zip(&s.gates).map(|(&a, &g)| a && g).collect();
        let ex = policy.communicate(tape, binds, &out, traj.layout, &senders, &s.alive)?;
        h = out.hidden;
        c = ex.context;
    }
    Ok(vars)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    /// Sampled actions and sampled gates.
    Train,
    /// Sampled (or greedy) actions and thresholded gates.
    Eval { greedy: bool },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub episode: u64,
    pub steps: usize,
    pub total_reward: f64,
    pub success: bool,
}

/// One environment step of one episode, for debugging traces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub episode: u64,
    pub t: usize,
    pub positions: Vec<Option<(usize, usize)>>,
    pub alive: Vec<bool>,
    pub actions: Vec<usize>,
    pub gates: Vec<bool>,
    pub rewards: Vec<f64>,
    pub team_reward: f64,
    pub done: bool,
    pub success: bool,
}

/// Sinks for per-step records. Attention is emitted for every round and
/// every alive receiver.
#[derive(Default)]
pub struct Observers<'a> {
    pub attention: Option<&'a mut dyn FnMut(&AttentionRecord)>,
    pub trace: Option<&'a mut dyn FnMut(&TraceRecord)>,
}

/// A batch of environments with per-row recurrent state.
struct Batch {
    envs: Vec<Box<dyn Environment>>,
    layout: Layout,
    obs_dim: usize,
    obs: Vec<f64>,
    keep: Vec<bool>,
    h: Vec<f64>,
    c: Vec<f64>,
    episode: Vec<u64>,
    returns: Vec<f64>,
    /// Environment still producing episodes.
    running: Vec<bool>,
    next_episode: u64,
}

struct StepOutcome {
    data: StepData,
    finished: Vec<EpisodeStats>,
}

impl Batch {
    fn new(spec: &EnvSpec, batch: usize, hidden: usize, value_dim: usize) -> Result<Self> {
        let envs = (0..batch).map(|_| spec.build()).collect::<Result<Vec<_>>>()?;
        let agents = envs[0].agent_count();
        let obs_dim = envs[0].observation_size();
        let rows = batch * agents;
        Ok(Self {
            envs,
            layout: Layout { batch, agents },
            obs_dim,
            obs: vec![0.0; rows * obs_dim],
            keep: vec![false; rows],
            h: vec![0.0; rows * hidden],
            c: vec![0.0; rows * value_dim],
            episode: vec![0; batch],
            returns: vec![0.0; batch],
            running: vec![false; batch],
            next_episode: 0,
        })
    }

    fn write_obs(&mut self, b: usize, obs: &[Vec<f64>]) {
        let n = self.layout.agents;
        for (i, o) in obs.iter().enumerate() {
            let r = b * n + i;
            self.obs[r * self.obs_dim..(r + 1) * self.obs_dim].copy_from_slice(o);
        }
    }

    fn start(&mut self, b: usize, seed: u64) {
        let obs = self.envs[b].reset(seed);
        self.write_obs(b, &obs);
        let n = self.layout.agents;
        self.keep[b * n..(b + 1) * n].iter_mut().for_each(|k| *k = false);
        self.episode[b] = self.next_episode;
        self.next_episode += 1;
        self.returns[b] = 0.0;
        self.running[b] = true;
    }

    fn alive(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.layout.rows());
        for (b, env) in self.envs.iter().enumerate() {
            let alive = env.alive();
            out.extend(alive.into_iter().map(|a| a && self.running[b]));
        }
        out
    }

    /// Runs the policy for one step on `tape`, samples, exchanges messages
    /// and steps every running environment. Finished environments are
    /// restarted through `restart` when it returns a seed.
    #[allow(clippy::too_many_arguments)]
    fn step<F: Scalar>(
        &mut self,
        tape: &mut Tape<F>,
        binds: &Bindings,
        policy: &PolicyNet,
        h_prev: Var,
        c_prev: Var,
        phase: Phase,
        rng: &mut ChaCha8Rng,
        restart: &mut dyn FnMut(&mut ChaCha8Rng) -> Option<u64>,
        obs_sink: &mut Observers<'_>,
        log_attention: &dyn Fn(u64) -> bool,
    ) -> Result<(StepOutcome, PolicyOutput, Var)> {
        let layout = self.layout;
        let (n, rows) = (layout.agents, layout.rows());
        let alive = self.alive();
        let keep = self.keep.clone();
        let obs = self.obs.clone();
        let out = policy_step(tape, binds, policy, &obs, self.obs_dim, &keep, h_prev, c_prev)?;

        let lp = tape.value(out.log_probs).to_f64();
        let na = lp.len() / rows;
        if let Some(r) = (0..rows).find(|&r| alive[r] && lp[r * na..(r + 1) * na].iter().any(|l| l.is_nan())) {
            // the caller fills in the iteration
            return Err(Error::NonFinite {
                iteration: 0,
                detail: format!("policy log-probabilities of row {r} are NaN"),
            });
        }
        let mut actions = vec![0usize; rows];
        let mut probs = vec![Vec::new(); rows];
        for r in 0..rows {
            if !alive[r] {
                continue;
            }
            let p: Vec<f64> = lp[r * na..(r + 1) * na].iter().map(|l| l.exp()).collect();
            actions[r] = match phase {
                Phase::Eval { greedy: true } => argmax(&p),
                _ => sample_action(&p, rng)?.0,
            };
            probs[r] = p;
        }
        let gates: Vec<bool> = match out.gate_logits {
            Some(g) => {
                let g = tape.value(g).to_f64();
                (0..rows)
                    .map(|r| {
                        if !alive[r] {
                            return false;
                        }
                        match phase {
                            Phase::Train => rng.gen::<f64>() < sigmoid(g[r]),
                            Phase::Eval { .. } => sigmoid(g[r]) > 0.5,
                        }
                    })
                    .collect()
            }
            None => vec![true; rows],
        };
        let senders: Vec<bool> = alive.iter().zip(&gates).map(|(&a, &g)| a && g).collect();
        let ex = policy.communicate(tape, binds, &out, layout, &senders, &alive)?;

        if let Some(sink) = obs_sink.attention.as_mut() {
            for b in 0..layout.batch {
                if !self.running[b] || !log_attention(self.episode[b]) {
                    continue;
                }
                let positions = self.envs[b].positions();
                let t = self.envs[b].steps_taken();
                let block = b * n..(b + 1) * n;
                let rounds = ex.attention.len().max(1);
                for round in 0..rounds {
                    for i in 0..n {
                        let r = b * n + i;
                        if !alive[r] {
                            continue;
                        }
                        let weights = ex.attention.get(round).map_or_else(Vec::new, |a| a.row(r).iter().map(|v| v.as_f64()).collect());
                        sink(&AttentionRecord {
                            episode: self.episode[b],
                            t,
                            round,
                            receiver: i,
                            weights,
                            gates: gates[block.clone()].to_vec(),
                            positions: positions.clone(),
                            alive: alive[block.clone()].to_vec(),
                            action: actions[r],
                            action_probs: probs[r].clone(),
                        });
                    }
                }
            }
        }

        let mut rewards = vec![0.0; rows];
        let mut team = vec![0.0; layout.batch];
        let mut done = vec![false; layout.batch];
        let mut finished = Vec::new();
        for b in 0..layout.batch {
            if !self.running[b] {
                continue;
            }
            let before = self.envs[b].alive();
            let positions = self.envs[b].positions();
            let res = self.envs[b].step(&actions[b * n..(b + 1) * n])?;
            rewards[b * n..(b + 1) * n].copy_from_slice(&res.rewards);
            team[b] = res.team_reward;
            done[b] = res.done;
            self.returns[b] += res.team_reward;
            if let Some(sink) = obs_sink.trace.as_mut() {
                sink(&TraceRecord {
                    episode: self.episode[b],
                    t: self.envs[b].steps_taken() - 1,
                    positions,
                    alive: before.clone(),
                    actions: actions[b * n..(b + 1) * n].to_vec(),
                    gates: gates[b * n..(b + 1) * n].to_vec(),
                    rewards: res.rewards.clone(),
                    team_reward: res.team_reward,
                    done: res.done,
                    success: res.success,
                });
            }
            if res.done {
                finished.push(EpisodeStats {
                    episode: self.episode[b],
                    steps: self.envs[b].steps_taken(),
                    total_reward: self.returns[b],
                    success: res.success,
                });
                match restart(rng) {
                    Some(seed) => self.start(b, seed),
                    None => self.running[b] = false,
                }
            } else {
                let obs = self.envs[b].observations();
                self.write_obs(b, &obs);
                let now = self.envs[b].alive();
                for i in 0..n {
                    self.keep[b * n + i] = before[i] && now[i] && !res.spawned[i];
                }
            }
        }
        let data = StepData {
            obs,
            keep,
            alive,
            actions,
            gates,
            rewards,
            team_rewards: team,
            done,
        };
        Ok((StepOutcome { data, finished }, out, ex.context))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub episodes: u64,
    pub success_rate: f64,
    pub mean_steps: f64,
    pub mean_reward: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub entropy: f64,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str =
        "iteration,episodes,success_rate,mean_steps,mean_reward,actor_loss,critic_loss,entropy";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.iteration,
            self.episodes,
            self.success_rate,
            self.mean_steps,
            self.mean_reward,
            self.actor_loss,
            self.critic_loss,
            self.entropy
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<F> {
    pub params: ParamStore<F>,
    pub model: ModelConfig,
    pub metrics: Vec<MetricsRow>,
    pub iterations: usize,
    pub episodes: u64,
}

#[derive(Default)]
pub struct TrainHooks<'a> {
    pub metrics: Option<&'a mut dyn FnMut(&MetricsRow)>,
    pub observers: Observers<'a>,
}

/// Stream of sampling randomness, separate from parameter initialization.
fn run_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

pub fn train<F: Scalar>(
    env: &EnvSpec,
    comm: &CommConfig,
    cfg: &TrainConfig,
    hooks: &mut TrainHooks<'_>,
) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    comm.validate()?;
    let probe = env.build()?;
    let model = model_config(probe.as_ref(), cfg, comm);
    let store = init_params::<F>(&model.specs(), cfg.seed)?;
    train_from(env, &model, store, cfg, hooks)
}

/// Trains starting from existing parameters.
pub fn train_from<F: Scalar>(
    env: &EnvSpec,
    model: &ModelConfig,
    mut store: ParamStore<F>,
    cfg: &TrainConfig,
    hooks: &mut TrainHooks<'_>,
) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    let policy = PolicyNet::resolve(&store, model)?;
    let critic = CriticNet::resolve(&store, model)?;
    let opt = cfg.optimizer();
    let mut rng = run_rng(cfg.seed);
    let mut batch = Batch::new(env, cfg.batch, model.hidden, model.comm.value_dim)?;
    if batch.layout.agents != model.agents || batch.obs_dim != model.obs_dim {
        return Err(Error::Config("environment does not match the model shape".into()));
    }
    for b in 0..cfg.batch {
        let seed = rng.gen();
        batch.start(b, seed);
    }
    let rows = batch.layout.rows();
    let every = cfg.attention_every;

    let mut metrics = Vec::new();
    let mut episodes_done: u64 = 0;
    let mut window: Vec<EpisodeStats> = Vec::new();
    let mut window_losses = Vec::new();
    let mut iteration = 0usize;
    while episodes_done < cfg.episodes {
        if let Some(c) = &cfg.curriculum {
            let rate = c.rate(episodes_done);
            batch.envs.iter_mut().for_each(|e| e.set_arrival_rate(rate));
        }
        let mut tape = Tape::<F>::new();
        let binds = store.bind(&mut tape);
        let h0 = batch.h.clone();
        let c0 = batch.c.clone();
        let mut h = tape.constant(Tensor::new(vec![rows, model.hidden], h0.iter().map(|&v| F::of(v)).collect())?);
        let mut c = tape.constant(Tensor::new(
            vec![rows, model.comm.value_dim],
            c0.iter().map(|&v| F::of(v)).collect(),
        )?);
        let mut steps = Vec::with_capacity(cfg.rollout_len);
        let mut vars = Vec::with_capacity(cfg.rollout_len);
        for _ in 0..cfg.rollout_len {
            let mut restart = |r: &mut ChaCha8Rng| Some(r.gen::<u64>());
            let (outcome, out, ctx) = batch.step(
                &mut tape,
                &binds,
                &policy,
                h,
                c,
                Phase::Train,
                &mut rng,
                &mut restart,
                &mut hooks.observers,
                &|ep| ep % every == 0,
            )
            .map_err(|e| match e {
                Error::NonFinite { detail, .. } => Error::NonFinite { iteration, detail },
                e => e,
            })?;
            vars.push(step_terms(&mut tape, &out, &outcome.data.actions, &outcome.data.gates)?);
            steps.push(outcome.data);
            episodes_done += outcome.finished.len() as u64;
            window.extend(outcome.finished);
            h = out.hidden;
            c = ctx;
        }
        batch.h = tape.value(h).to_f64();
        batch.c = tape.value(c).to_f64();

        let bootstrap = bootstrap_values(&mut batch, &policy, &critic, &store, &mut rng)?;
        let traj = Trajectory {
            layout: batch.layout,
            obs_dim: batch.obs_dim,
            h0,
            c0,
            steps,
            bootstrap,
        };
        let losses = assemble_loss(&mut tape, &binds, &critic, &traj, &vars, cfg)?;
        let (loss, values) = (losses.total, losses.values);
        if !values.total.is_finite() {
            return Err(Error::NonFinite {
                iteration,
                detail: format!(
                    "loss {:?}; parameters finite: {}",
                    values,
                    store.all_finite()
                ),
            });
        }
        tape.backward(loss)?;
        store.accumulate_grads(&tape, &binds);
        let grad_norm = match cfg.grad_clip {
            Some(max) => store.clip_grad_norm(max),
            None => store.grad_norm(),
        };
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite {
                iteration,
                detail: format!("gradient norm {grad_norm}; loss {values:?}"),
            });
        }
        opt.step(&mut store)?;
        if !store.all_finite() {
            return Err(Error::NonFinite {
                iteration,
                detail: format!("parameters left non-finite by the update; gradient norm {grad_norm}"),
            });
        }
        window_losses.push(values);
        iteration += 1;

        if iteration % cfg.log_interval == 0 || episodes_done >= cfg.episodes {
            let row = summarize(iteration, episodes_done, &window, &window_losses);
            if let Some(m) = hooks.metrics.as_mut() {
                m(&row);
            }
            metrics.push(row);
            window.clear();
            window_losses.clear();
        }
    }
    Ok(TrainOutcome {
        params: store,
        model: model.clone(),
        metrics,
        iterations: iteration,
        episodes: episodes_done,
    })
}

fn summarize(iteration: usize, episodes: u64, eps: &[EpisodeStats], losses: &[LossValues]) -> MetricsRow {
    let mean = |f: &dyn Fn(&EpisodeStats) -> f64| {
        if eps.is_empty() {
            f64::NAN
        } else {
            eps.iter().map(f).sum::<f64>() / eps.len() as f64
        }
    };
    let lmean = |f: &dyn Fn(&LossValues) -> f64| losses.iter().map(f).sum::<f64>() / losses.len().max(1) as f64;
    MetricsRow {
        iteration,
        episodes,
        success_rate: mean(&|e| f64::from(u8::from(e.success))),
        mean_steps: mean(&|e| e.steps as f64),
        mean_reward: mean(&|e| e.total_reward),
        actor_loss: lmean(&|l| l.actor),
        critic_loss: lmean(&|l| l.critic),
        entropy: lmean(&|l| l.entropy),
    }
}

/// `Q̂` of the state after the segment, with a freshly sampled joint action.
fn bootstrap_values<F: Scalar>(
    batch: &mut Batch,
    policy: &PolicyNet,
    critic: &CriticNet,
    store: &ParamStore<F>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let rows = batch.layout.rows();
    let mc = policy.config();
    let mut tape = Tape::<F>::new();
    let binds = store.bind_frozen(&mut tape);
    let h = tape.constant(Tensor::new(vec![rows, mc.hidden], batch.h.iter().map(|&v| F::of(v)).collect())?);
    let c = tape.constant(Tensor::new(
        vec![rows, mc.comm.value_dim],
        batch.c.iter().map(|&v| F::of(v)).collect(),
    )?);
    let out = policy_step(&mut tape, &binds, policy, &batch.obs, batch.obs_dim, &batch.keep, h, c)?;
    let lp = tape.value(out.log_probs).to_f64();
    let na = lp.len() / rows;
    let alive = batch.alive();
    let mut actions = vec![None; rows];
    for r in 0..rows {
        if alive[r] {
            let p: Vec<f64> = lp[r * na..(r + 1) * na].iter().map(|l| l.exp()).collect();
            actions[r] = Some(sample_action(&p, rng)?.0);
        }
    }
    let h = tape.detach(out.hidden);
    let q = critic.forward(&mut tape, &binds, h, &actions)?;
    Ok(tape.value(q).to_f64())
}

/// Collects one segment of `cfg.rollout_len` steps from `cfg.batch` fresh
/// environments with frozen parameters, starting from zero hidden states.
pub fn collect_rollout<F: Scalar>(
    store: &ParamStore<F>,
    model: &ModelConfig,
    env: &EnvSpec,
    cfg: &TrainConfig,
) -> Result<Trajectory> {
    cfg.validate()?;
    let policy = PolicyNet::resolve(store, model)?;
    let critic = CriticNet::resolve(store, model)?;
    let mut rng = run_rng(cfg.seed);
    let mut batch = Batch::new(env, cfg.batch, model.hidden, model.comm.value_dim)?;
    for b in 0..cfg.batch {
        let seed = rng.gen();
        batch.start(b, seed);
    }
    let rows = batch.layout.rows();
    let h0 = batch.h.clone();
    let c0 = batch.c.clone();
    let mut steps = Vec::with_capacity(cfg.rollout_len);
    for _ in 0..cfg.rollout_len {
        let mut tape = Tape::<F>::new();
        let binds = store.bind_frozen(&mut tape);
        let h = tape.constant(Tensor::new(vec![rows, model.hidden], batch.h.iter().map(|&v| F::of(v)).collect())?);
        let c = tape.constant(Tensor::new(
            vec![rows, model.comm.value_dim],
            batch.c.iter().map(|&v| F::of(v)).collect(),
        )?);
        let mut restart = |r: &mut ChaCha8Rng| Some(r.gen::<u64>());
        let (outcome, out, ctx) = batch.step(
            &mut tape,
            &binds,
            &policy,
            h,
            c,
            Phase::Train,
            &mut rng,
            &mut restart,
            &mut Observers::default(),
            &|_| false,
        )?;
        batch.h = tape.value(out.hidden).to_f64();
        batch.c = tape.value(ctx).to_f64();
        steps.push(outcome.data);
    }
    let bootstrap = bootstrap_values(&mut batch, &policy, &critic, store, &mut rng)?;
    Ok(Trajectory {
        layout: batch.layout,
        obs_dim: batch.obs_dim,
        h0,
        c0,
        steps,
        bootstrap,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub episodes: usize,
    pub seed: u64,
    pub greedy: bool,
    /// Environments stepped together.
    pub batch: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            episodes: 500,
            seed: 1_000_000,
            greedy: false,
            batch: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub success_rate: f64,
    pub success_se: f64,
    pub mean_steps: f64,
    pub steps_se: f64,
    pub mean_reward: f64,
    pub reward_se: f64,
}

/// Mean and standard error of the mean.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

impl EvalSummary {
    pub fn from_episodes(eps: &[EpisodeStats]) -> Self {
        let col = |f: &dyn Fn(&EpisodeStats) -> f64| eps.iter().map(f).collect::<Vec<_>>();
        let (success_rate, success_se) = mean_se(&col(&|e| f64::from(u8::from(e.success))));
        let (mean_steps, steps_se) = mean_se(&col(&|e| e.steps as f64));
        let (mean_reward, reward_se) = mean_se(&col(&|e| e.total_reward));
        Self {
            episodes: eps.len(),
            success_rate,
            success_se,
            mean_steps,
            steps_se,
            mean_reward,
            reward_se,
        }
    }
}

/// Runs the policy alone, with no critic involvement. Episode `k` uses
/// environment seed `opts.seed + k`.
pub fn evaluate<F: Scalar>(
    store: &ParamStore<F>,
    model: &ModelConfig,
    env: &EnvSpec,
    opts: &EvalOptions,
    observers: &mut Observers<'_>,
) -> Result<(EvalSummary, Vec<EpisodeStats>)> {
    if opts.episodes == 0 || opts.batch == 0 {
        return Err(Error::Config("evaluation needs at least one episode and batch slot".into()));
    }
    let calls_before = critic_calls();
    let policy = PolicyNet::resolve(store, model)?;
    let width = opts.batch.min(opts.episodes);
    let mut batch = Batch::new(env, width, model.hidden, model.comm.value_dim)?;
    if batch.layout.agents != model.agents || batch.obs_dim != model.obs_dim {
        return Err(Error::Config("environment does not match the checkpoint's model".into()));
    }
    let mut rng = run_rng(opts.seed);
    let mut issued = 0u64;
    for b in 0..width {
        batch.start(b, opts.seed + issued);
        issued += 1;
    }
    let rows = batch.layout.rows();
    let mut finished = Vec::with_capacity(opts.episodes);
    let total = opts.episodes as u64;
    while batch.running.iter().any(|&r| r) {
        let mut tape = Tape::<F>::new();
        let binds = store.bind_frozen(&mut tape);
        let h = tape.constant(Tensor::new(vec![rows, model.hidden], batch.h.iter().map(|&v| F::of(v)).collect())?);
        let c = tape.constant(Tensor::new(
            vec![rows, model.comm.value_dim],
            batch.c.iter().map(|&v| F::of(v)).collect(),
        )?);
        let seed0 = opts.seed;
        let mut restart = |_: &mut ChaCha8Rng| {
            (issued < total).then(|| {
                issued += 1;
                seed0 + issued - 1
            })
        };
        let (outcome, out, ctx) = batch.step(
            &mut tape,
            &binds,
            &policy,
            h,
            c,
            Phase::Eval { greedy: opts.greedy },
            &mut rng,
            &mut restart,
            observers,
            &|_| true,
        )?;
        batch.h = tape.value(out.hidden).to_f64();
        batch.c = tape.value(ctx).to_f64();
        finished.extend(outcome.finished);
    }
    finished.sort_by_key(|e| e.episode);
    debug_assert_eq!(critic_calls(), calls_before, "evaluation must not run the critic");
    Ok((EvalSummary::from_episodes(&finished), finished))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comm::CommMode;
    use crate::envs::EnvOverrides;
    use crate::testutil::store_fd_error_where;

    fn tiny_prey(horizon: usize) -> EnvSpec {
        EnvSpec::new("prey-small").with(EnvOverrides {
            grid: Some(3),
            agents: Some(2),
            horizon: Some(horizon),
            ..Default::default()
        })
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            batch: 2,
            rollout_len: 4,
            hidden: 4,
            critic_hidden: 4,
            episodes: 8,
            log_interval: 1,
            ..Default::default()
        }
    }

    fn tiny_comm(gating: bool) -> CommConfig {
        CommConfig {
            key_dim: 2,
            value_dim: 2,
            rounds: 2,
            gating,
            ..Default::default()
        }
    }

    fn setup(env: &EnvSpec, cfg: &TrainConfig, comm: &CommConfig, seed: u64) -> (ModelConfig, ParamStore<f64>) {
        let model = model_config(env.build().unwrap().as_ref(), cfg, comm);
        let store = init_params::<f64>(&model.specs(), seed).unwrap();
        (model, store)
    }

    #[test]
    fn td_targets_by_hand() {
        let y = td_targets(&[1.0, -0.5, 2.0], &[10.0, 20.0, 30.0], &[false, true, false], 0.9);
        assert_eq!(y, vec![1.0 + 9.0, -0.5, 2.0 + 27.0]);
        let y0 = td_targets(&[1.0, 2.0], &[5.0, 5.0], &[false, false], 0.0);
        assert_eq!(y0, vec![1.0, 2.0]);
    }

    #[test]
    fn discounted_returns_by_hand() {
        let g = discounted_returns(&[1.0, 1.0, 1.0], 10.0, &[false, false, false], 0.5);
        // 1 + .5(1 + .5(1 + .5·10))
        assert_eq!(g, vec![3.0, 4.0, 6.0]);
        let g = discounted_returns(&[1.0, 2.0, 3.0], 10.0, &[false, true, false], 0.5);
        assert_eq!(g, vec![2.0, 2.0, 8.0]);
    }

    #[test]
    fn rollout_shapes_and_reset_masks() {
        let env = tiny_prey(2);
        let cfg = TrainConfig { rollout_len: 5, ..tiny_cfg() };
        let (model, store) = setup(&env, &cfg, &tiny_comm(false), 1);
        let traj = collect_rollout(&store, &model, &env, &cfg).unwrap();
        assert_eq!(traj.steps.len(), 5);
        let agents = traj.layout.agents;
        for t in 0..4 {
            for b in 0..traj.layout.batch {
                if traj.steps[t].done[b] {
                    for i in 0..agents {
                        assert!(!traj.steps[t + 1].keep[b * agents + i]);
                    }
                }
            }
        }
        assert!(traj.steps[1].done.iter().all(|&d| d), "horizon 2 ends every episode at step 2");
        let one = collect_rollout(&store, &model, &env, &TrainConfig { rollout_len: 1, ..cfg }).unwrap();
        assert_eq!(one.steps.len(), 1);
        assert_eq!(one.steps[0].actions.len(), traj.layout.rows());
    }

    fn fd_check(cfg: &TrainConfig, comm: &CommConfig) -> f64 {
        let env = tiny_prey(3);
        let (model, store) = setup(&env, cfg, comm, 7);
        let traj = collect_rollout(&store, &model, &env, cfg).unwrap();
        let policy = PolicyNet::resolve(&store, &model).unwrap();
        let critic = CriticNet::resolve(&store, &model).unwrap();
        let consts = {
            let mut tape = Tape::new();
            let binds = store.bind_frozen(&mut tape);
            let vars = replay(&mut tape, &binds, &policy, &traj).unwrap();
            loss_constants(&mut tape, &binds, &critic, &traj, &vars, cfg).unwrap()
        };
        // the critic sees detached hidden states, so each loss is checked
        // against its own parameters only
        let actor = |tape: &mut Tape<f64>, binds: &Bindings| {
            let vars = replay(tape, binds, &policy, &traj).unwrap();
            surrogate_loss(tape, binds, &critic, &traj, &vars, cfg, &consts).unwrap().actor
        };
        let critic_loss = |tape: &mut Tape<f64>, binds: &Bindings| {
            let vars = replay(tape, binds, &policy, &traj).unwrap();
            surrogate_loss(tape, binds, &critic, &traj, &vars, cfg, &consts).unwrap().critic
        };
        let a = store_fd_error_where(&store, &actor, 1e-6, 1e-6, &|n| n.starts_with("policy."));
        let c = store_fd_error_where(&store, &critic_loss, 1e-6, 1e-6, &|n| n.starts_with("critic."));
        a.max(c)
    }

    #[test]
    fn full_loss_matches_finite_differences() {
        let cases = [
            (Advantage::Q, RewardMode::Team, false),
            (Advantage::Return, RewardMode::Team, true),
            (Advantage::TdError, RewardMode::PerAgent, true),
            (Advantage::QMinusValue, RewardMode::PerAgent, false),
        ];
        for (advantage, reward_mode, gating) in cases {
            let cfg = TrainConfig { advantage, reward_mode, ..tiny_cfg() };
            let err = fd_check(&cfg, &tiny_comm(gating));
            assert!(err < 1e-3, "{advantage:?}/{reward_mode:?}/gating={gating}: {err}");
        }
    }

    #[test]
    fn actor_and_critic_losses_touch_disjoint_parameters() {
        let env = tiny_prey(3);
        let cfg = TrainConfig { advantage: Advantage::Return, ..tiny_cfg() };
        let (model, store) = setup(&env, &cfg, &tiny_comm(true), 3);
        let traj = collect_rollout(&store, &model, &env, &cfg).unwrap();
        let policy = PolicyNet::resolve(&store, &model).unwrap();
        let critic = CriticNet::resolve(&store, &model).unwrap();
        for actor_side in [true, false] {
            let mut tape = Tape::new();
            let binds = store.bind(&mut tape);
            let losses = trajectory_loss(&mut tape, &binds, &policy, &critic, &traj, &cfg).unwrap();
            tape.backward(if actor_side { losses.actor } else { losses.critic }).unwrap();
            let mut s = store.clone();
            s.accumulate_grads(&tape, &binds);
            for p in s.iter() {
                let norm: f64 = p.grad.as_ref().map_or(0.0, |g| g.iter().map(|x| x * x).sum());
                let is_critic = p.name.starts_with("critic.");
                if is_critic == actor_side {
                    assert_eq!(norm, 0.0, "{} got gradient from the wrong loss", p.name);
                }
            }
        }
    }

    #[test]
    fn entropy_only_objective_moves_toward_uniform() {
        let env = tiny_prey(3);
        let cfg = TrainConfig { entropy_coef: 1.0, value_loss_coef: 0.0, lr: 0.01, ..tiny_cfg() };
        let comm = CommConfig { mode: CommMode::None, ..tiny_comm(false) };
        let (model, mut store) = setup(&env, &cfg, &comm, 11);
        // sharpen the initial policy so there is room to move
        for p in store.iter_mut().filter(|p| p.name.starts_with("policy.action")) {
            p.value.data_mut().iter_mut().for_each(|v| *v *= 20.0);
        }
        let traj = collect_rollout(&store, &model, &env, &cfg).unwrap();
        let opt = cfg.optimizer();
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..50 {
            let policy = PolicyNet::resolve(&store, &model).unwrap();
            let critic = CriticNet::resolve(&store, &model).unwrap();
            let mut tape = Tape::new();
            let binds = store.bind(&mut tape);
            let vars = replay(&mut tape, &binds, &policy, &traj).unwrap();
            let mut consts = loss_constants(&mut tape, &binds, &critic, &traj, &vars, &cfg).unwrap();
            consts.weights.iter_mut().for_each(|w| w.iter_mut().for_each(|x| *x = 0.0));
            let losses = surrogate_loss(&mut tape, &binds, &critic, &traj, &vars, &cfg, &consts).unwrap();
            first.get_or_insert(losses.values.entropy);
            last = losses.values.entropy;
            tape.backward(losses.total).unwrap();
            store.accumulate_grads(&tape, &binds);
            opt.step(&mut store).unwrap();
        }
        let first = first.unwrap();
        assert!(last > first + 0.1, "entropy {first} -> {last}");
        assert!(last <= 5f64.ln() + 1e-9);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let env = tiny_prey(3);
        let cfg = TrainConfig { lr: 0.0, ..tiny_cfg() };
        let comm = tiny_comm(true);
        let (model, store) = setup(&env, &cfg, &comm, cfg.seed);
        let out = train::<f64>(&env, &comm, &cfg, &mut TrainHooks::default()).unwrap();
        assert_eq!(out.model, model);
        for (a, b) in out.params.iter().zip(store.iter()) {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let env = tiny_prey(3);
        let comm = tiny_comm(true);
        let cfg = TrainConfig { advantage: Advantage::Return, episodes: 20, ..tiny_cfg() };
        let run = |cfg: &TrainConfig| train::<f64>(&env, &comm, cfg, &mut TrainHooks::default()).unwrap();
        let (a, b) = (run(&cfg), run(&cfg));
        assert_eq!(a.metrics, b.metrics);
        for (p, q) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(p.value, q.value);
        }
        let c = run(&TrainConfig { seed: 1, ..cfg });
        assert_ne!(a.metrics, c.metrics);
        assert!(a.episodes >= 20);
    }

    #[test]
    fn metrics_rows_are_emitted_through_the_hook() {
        let env = tiny_prey(3);
        let comm = tiny_comm(false);
        let cfg = TrainConfig { log_interval: 2, ..tiny_cfg() };
        let mut seen = Vec::new();
        let mut sink = |m: &MetricsRow| seen.push(m.clone());
        let out = train::<f32>(&env, &comm, &cfg, &mut TrainHooks { metrics: Some(&mut sink), ..Default::default() }).unwrap();
        assert_eq!(seen, out.metrics);
        assert!(!seen.is_empty());
        assert_eq!(seen[0].csv().split(',').count(), MetricsRow::CSV_HEADER.split(',').count());
    }

    #[test]
    fn stronger_entropy_bonus_keeps_more_entropy() {
        // one-step episodes make this a contextual bandit
        let env = tiny_prey(1);
        let comm = CommConfig { mode: CommMode::None, ..tiny_comm(false) };
        let mut finals = Vec::new();
        for entropy_coef in [0.0, 0.1, 1.0] {
            let cfg = TrainConfig {
                entropy_coef,
                lr: 5e-3,
                batch: 8,
                hidden: 8,
                critic_hidden: 8,
                episodes: 4000,
                ..tiny_cfg()
            };
            let out = train::<f64>(&env, &comm, &cfg, &mut TrainHooks::default()).unwrap();
            let tail = &out.metrics[out.metrics.len() - 10..];
            finals.push(tail.iter().map(|m| m.entropy).sum::<f64>() / tail.len() as f64);
        }
        assert!(finals[0] < finals[1] && finals[1] < finals[2], "{finals:?}");
    }

    #[test]
    fn evaluation_is_reproducible_and_critic_free() {
        let env = tiny_prey(4);
        let cfg = TrainConfig { advantage: Advantage::Return, ..tiny_cfg() };
        let comm = tiny_comm(true);
        let (model, store) = setup(&env, &cfg, &comm, 5);
        let opts = EvalOptions { episodes: 7, batch: 3, ..Default::default() };
        let before = critic_calls();
        let (s1, e1) = evaluate(&store, &model, &env, &opts, &mut Observers::default()).unwrap();
        assert_eq!(critic_calls(), before);
        let (s2, e2) = evaluate(&store, &model, &env, &opts, &mut Observers::default()).unwrap();
        assert_eq!((s1.clone(), e1.clone()), (s2, e2));
        assert_eq!(s1.episodes, 7);
        let ids: Vec<u64> = e1.iter().map(|e| e.episode).collect();
        assert_eq!(ids, (0..7).collect::<Vec<_>>());
        // the batch width does not change per-episode seeds or outcomes
        let wide = EvalOptions { batch: 7, greedy: true, ..opts.clone() };
        let narrow = EvalOptions { batch: 2, greedy: true, ..opts };
        let (_, a) = evaluate(&store, &model, &env, &wide, &mut Observers::default()).unwrap();
        let (_, b) = evaluate(&store, &model, &env, &narrow, &mut Observers::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mean_se_by_hand() {
        let (m, se) = mean_se(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_se(&[3.0]), (3.0, 0.0));
    }

    #[test]
    fn curriculum_ramps_linearly() {
        let c = Curriculum { start_rate: 0.1, end_rate: 0.3, start_episode: 100, end_episode: 300 };
        assert_eq!(c.rate(0), 0.1);
        assert!((c.rate(200) - 0.2).abs() < 1e-12);
        assert_eq!(c.rate(1000), 0.3);
    }
}
