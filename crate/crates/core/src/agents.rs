//! Shared per-agent policy and the centralized critic.
//!
//! All agents run the same [`PolicyNet`]: observation encoder, GRU over
//! `[encode(ω) ‖ c]`, an action head, the communication heads and an
//! optional gate head. The [`CriticNet`] sees every agent's hidden state and
//! one-hot action and is only used during training.

use std::cell::Cell;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::comm::{CommConfig, CommHeads, CommMode, Exchange, Layout, Messages};
use crate::error::{shape_err, Error, Result};
use crate::nn::{Bindings, GruCell, Init, Linear, ParamSpec, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Initial gate bias: gates start mostly open (σ(2) ≈ 0.88) so early
/// training sees messages.
pub const GATE_BIAS_INIT: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub obs_dim: usize,
    pub actions: usize,
    pub agents: usize,
    pub hidden: usize,
    pub critic_hidden: usize,
    /// One critic output per agent instead of a single team value.
    pub per_agent_values: bool,
    /// Adds a state-value network `V(h_1..h_N)` next to the critic.
    #[serde(default)]
    pub value_baseline: bool,
    pub comm: CommConfig,
}

impl ModelConfig {
    pub fn new(obs_dim: usize, actions: usize, agents: usize, comm: CommConfig) -> Self {
        Self {
            obs_dim,
            actions,
            agents,
            hidden: 128,
            critic_hidden: 128,
            per_agent_values: false,
            value_baseline: false,
            comm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.comm.validate()?;
        if self.obs_dim == 0 || self.actions == 0 || self.agents == 0 || self.hidden == 0 || self.critic_hidden == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn critic_outputs(&self) -> usize {
        if self.per_agent_values {
            self.agents
        } else {
            1
        }
    }

    /// Policy parameters followed by critic parameters, in initialization order.
    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut v = PolicyNet::specs(self);
        v.extend(CriticNet::specs(self));
        v
    }
}

#[derive(Clone, Debug)]
pub struct PolicyNet {
    cfg: ModelConfig,
    encoder: Linear,
    gru: GruCell,
    action: Linear,
    comm: Option<CommHeads>,
    gate: Option<Linear>,
}

/// One batched policy step. Rows are `batch · agents`, environment-major.
#[derive(Clone, Debug)]
pub struct PolicyOutput {
    pub hidden: Var,
    pub logits: Var,
    pub log_probs: Var,
    pub messages: Option<Messages>,
    /// `rows × 1` when gating is enabled.
    pub gate_logits: Option<Var>,
}

impl PolicyNet {
    pub fn specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
        let mut v = Linear::specs("policy.encoder", cfg.obs_dim, cfg.hidden, true);
        v.extend(GruCell::specs("policy.gru", cfg.hidden + cfg.comm.value_dim, cfg.hidden));
        v.extend(Linear::specs("policy.action", cfg.hidden, cfg.actions, true));
        v.extend(CommHeads::specs(&cfg.comm, cfg.hidden));
        if cfg.comm.gating {
            let mut gate = Linear::specs("policy.gate", cfg.hidden, 1, true);
            gate[1].init = Init::Constant(GATE_BIAS_INIT);
            v.extend(gate);
        }
        v
    }

    pub fn resolve<F: Scalar>(store: &ParamStore<F>, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            encoder: Linear::resolve(store, "policy.encoder", cfg.obs_dim, cfg.hidden, true)?,
            gru: GruCell::resolve(store, "policy.gru", cfg.hidden + cfg.comm.value_dim, cfg.hidden)?,
            action: Linear::resolve(store, "policy.action", cfg.hidden, cfg.actions, true)?,
            comm: CommHeads::resolve(store, &cfg.comm, cfg.hidden)?,
            gate: if cfg.comm.gating {
                Some(Linear::resolve(store, "policy.gate", cfg.hidden, 1, true)?)
            } else {
                None
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// `obs` is `rows × obs_dim`, `context` is `rows × d_v` and `hidden` is
    /// `rows × hidden`. Each row only ever reads its own inputs.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        binds: &Bindings,
        obs: Var,
        context: Var,
        hidden: Var,
    ) -> Result<PolicyOutput> {
        let rows = tape.value(obs).rows();
        if tape.value(context).shape() != [rows, self.cfg.comm.value_dim] {
            return shape_err("policy context", tape.value(context).shape(), &[rows, self.cfg.comm.value_dim]);
        }
        let e = self.encoder.forward(tape, binds, obs)?;
        let e = tape.tanh(e)?;
        let x = tape.concat(&[e, context])?;
        let h = self.gru.step(tape, binds, x, hidden)?;
        let logits = self.action.forward(tape, binds, h)?;
        let log_probs = tape.log_softmax(logits);
        let messages = match &self.comm {
            Some(c) => Some(c.messages(tape, binds, h)?),
            None => None,
        };
        let gate_logits = match &self.gate {
            Some(g) => Some(g.forward(tape, binds, h)?),
            None => None,
        };
        Ok(PolicyOutput {
            hidden: h,
            logits,
            log_probs,
            messages,
            gate_logits,
        })
    }

    /// Exchanges messages produced by `out`, yielding the next step's
    /// incoming messages. With communication disabled the context is zero.
    pub fn communicate<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        binds: &Bindings,
        out: &PolicyOutput,
        layout: Layout,
        senders: &[bool],
        receivers: &[bool],
    ) -> Result<Exchange<F>> {
        match (&self.comm, out.messages) {
            (Some(c), Some(m)) => c.exchange(tape, binds, out.hidden, m, layout, senders, receivers),
            _ => {
                debug_assert_eq!(self.cfg.comm.mode, CommMode::None);
                let context = tape.constant(Tensor::zeros(&[layout.rows(), self.cfg.comm.value_dim]));
                Ok(Exchange {
                    context,
                    attention: Vec::new(),
                })
            }
        }
    }
}

thread_local! {
    static CRITIC_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of critic forward passes made on the current thread.
pub fn critic_calls() -> u64 {
    CRITIC_CALLS.with(|c| c.get())
}

/// Joint action-value estimate from all agents' hidden states and actions.
#[derive(Clone, Debug)]
pub struct CriticNet {
    agents: usize,
    hidden: usize,
    actions: usize,
    layer: Linear,
    out: Linear,
    baseline: Option<(Linear, Linear)>,
}

impl CriticNet {
    pub fn specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
        let input = cfg.agents * (cfg.hidden + cfg.actions);
        let mut v = Linear::specs("critic.hidden", input, cfg.critic_hidden, true);
        v.extend(Linear::specs("critic.out", cfg.critic_hidden, cfg.critic_outputs(), true));
        if cfg.value_baseline {
            v.extend(Linear::specs("critic.baseline.hidden", cfg.agents * cfg.hidden, cfg.critic_hidden, true));
            v.extend(Linear::specs("critic.baseline.out", cfg.critic_hidden, cfg.critic_outputs(), true));
        }
        v
    }

    pub fn resolve<F: Scalar>(store: &ParamStore<F>, cfg: &ModelConfig) -> Result<Self> {
        let input = cfg.agents * (cfg.hidden + cfg.actions);
        Ok(Self {
            agents: cfg.agents,
            hidden: cfg.hidden,
            actions: cfg.actions,
            layer: Linear::resolve(store, "critic.hidden", input, cfg.critic_hidden, true)?,
            out: Linear::resolve(store, "critic.out", cfg.critic_hidden, cfg.critic_outputs(), true)?,
            baseline: if cfg.value_baseline {
                Some((
                    Linear::resolve(store, "critic.baseline.hidden", cfg.agents * cfg.hidden, cfg.critic_hidden, true)?,
                    Linear::resolve(store, "critic.baseline.out", cfg.critic_hidden, cfg.critic_outputs(), true)?,
                ))
            } else {
                None
            },
        })
    }

    pub fn has_baseline(&self) -> bool {
        self.baseline.is_some()
    }

    /// State value from hidden states alone, `batch × outputs`.
    pub fn value<F: Scalar>(&self, tape: &mut Tape<F>, binds: &Bindings, hidden: Var) -> Result<Var> {
        CRITIC_CALLS.with(|c| c.set(c.get() + 1));
        let (layer, out) = self
            .baseline
            .as_ref()
            .ok_or_else(|| Error::Contract("critic has no value baseline".into()))?;
        let hv = tape.value(hidden);
        let rows = hv.rows();
        if hv.cols() != self.hidden || rows % self.agents != 0 {
            return shape_err("critic value", hv.shape(), &[rows, self.hidden]);
        }
        let x = tape.reshape(hidden, vec![rows / self.agents, self.agents * self.hidden])?;
        let z = layer.forward(tape, binds, x)?;
        let z = tape.tanh(z)?;
        out.forward(tape, binds, z)
    }

    /// `hidden` is `batch·agents × hidden`; `actions[r]` is `None` for
    /// inactive slots, which contribute a zero one-hot. Returns
    /// `batch × outputs`.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        binds: &Bindings,
        hidden: Var,
        actions: &[Option<usize>],
    ) -> Result<Var> {
        CRITIC_CALLS.with(|c| c.set(c.get() + 1));
        let hv = tape.value(hidden);
        let rows = hv.rows();
        if hv.cols() != self.hidden || rows != actions.len() || rows % self.agents != 0 {
            return shape_err("critic", hv.shape(), &[actions.len(), self.hidden]);
        }
        let mut onehot = vec![F::zero(); rows * self.actions];
        for (r, a) in actions.iter().enumerate() {
            if let Some(a) = *a {
                if a >= self.actions {
                    return Err(Error::Contract(format!("action {a} out of range")));
                }
                onehot[r * self.actions + a] = F::one();
            }
        }
        let onehot = tape.constant(Tensor::new(vec![rows, self.actions], onehot)?);
        let x = tape.concat(&[hidden, onehot])?;
        let x = tape.reshape(x, vec![rows / self.agents, self.agents * (self.hidden + self.actions)])?;
        let z = self.layer.forward(tape, binds, x)?;
        let z = tape.tanh(z)?;
        self.out.forward(tape, binds, z)
    }
}

/// Draws an action and returns `(action, log_prob, entropy)`.
pub fn sample_action(probs: &[f64], rng: &mut impl Rng) -> Result<(usize, f64, f64)> {
    let dist = WeightedIndex::new(probs)
        .map_err(|e| Error::Domain { op: "sample_action", detail: e.to_string() })?;
    let a = dist.sample(rng);
    Ok((a, probs[a].ln(), entropy(probs)))
}

pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

pub fn argmax(probs: &[f64]) -> usize {
    probs
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
        .0
}
