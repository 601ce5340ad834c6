//! Targeted inter-agent communication.
//!
//! Every agent emits a message made of a signature `k` and a value `v`.
//! A receiver predicts a query `q` and weighs each sender by
//! `softmax_i(q·k_i / √d_k)`; its incoming message is the weighted sum of
//! values. The receiver's own message takes part in the softmax. Extra
//! rounds refine the hidden state with `h' = tanh(W·[c ‖ h])` and repeat the
//! exchange from `h'`.
//!
//! The free functions operate on a single receiver and are the reference
//! semantics. [`CommHeads::exchange`] runs the same computation for a whole
//! batch of environments on a [`Tape`], as one block-diagonal attention.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_sigmoid, sigmoid, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{Bindings, Linear, ParamSpec, ParamStore};
use crate::tensor::{softmax_in_place, Scalar, Tensor};

/// Logit assigned to masked senders before the softmax.
pub const MASKED_LOGIT: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommMode {
    /// Signature/query attention.
    Targeted,
    /// Unweighted average of all unmasked messages.
    MeanPool,
    /// Incoming message is always zero.
    None,
}

impl fmt::Display for CommMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CommMode::Targeted => "targeted",
            CommMode::MeanPool => "mean",
            CommMode::None => "none",
        })
    }
}

impl FromStr for CommMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "targeted" | "tarmac" => Ok(CommMode::Targeted),
            "mean" | "mean_pool" => Ok(CommMode::MeanPool),
            "none" => Ok(CommMode::None),
            other => Err(Error::Config(format!("unknown communication mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CommConfig {
    pub key_dim: usize,
    pub value_dim: usize,
    pub rounds: usize,
    pub mode: CommMode,
    pub gating: bool,
    pub self_attention: bool,
}

impl Default for CommConfig {
    fn default() -> Self {
        Self {
            key_dim: 16,
            value_dim: 32,
            rounds: 1,
            mode: CommMode::Targeted,
            gating: false,
            self_attention: true,
        }
    }
}

impl CommConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        if self.key_dim == 0 || self.value_dim == 0 {
            return Err(Error::Config("message dimensions must be positive".into()));
        }
        if self.gating && self.mode == CommMode::None {
            return Err(Error::Config("gating requires communication (mode is `none`)".into()));
        }
        Ok(())
    }
}

/// One agent's broadcast unit: `[signature ‖ value]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Message<F> {
    pub signature: Vec<F>,
    pub value: Vec<F>,
}

impl<F: Scalar> Message<F> {
    pub fn concat(&self) -> Vec<F> {
        self.signature.iter().chain(&self.value).copied().collect()
    }
}

/// Attention of one receiver over all senders.
///
/// `senders[i]` says whether sender `i` may be attended to. Masked senders
/// get a logit of [`MASKED_LOGIT`] and therefore a weight of exactly zero.
/// When every sender is masked the result is one-hot on the receiver if the
/// receiver itself is unmasked (possible only with self-attention disabled);
/// otherwise it is an error.
pub fn attention_weights<F: Scalar>(
    query: &[F],
    signatures: &Tensor<F>,
    senders: &[bool],
    receiver: usize,
    self_attention: bool,
) -> Result<Vec<F>> {
    let n = signatures.rows();
    if signatures.cols() != query.len() || senders.len() != n || receiver >= n {
        return shape_err("attention_weights", signatures.shape(), &[senders.len(), query.len()]);
    }
    let allowed: Vec<bool> = (0..n)
        .map(|i| senders[i] && (self_attention || i != receiver))
        .collect();
    if !allowed.iter().any(|&a| a) {
        if senders[receiver] {
            let mut one_hot = vec![F::zero(); n];
            one_hot[receiver] = F::one();
            return Ok(one_hot);
        }
        return Err(Error::Contract("every sender is masked".into()));
    }
    let mut logits: Vec<F> = (0..n)
        .map(|i| {
            if allowed[i] {
                signatures.row(i).iter().zip(query).map(|(&k, &q)| k * q).sum()
            } else {
                F::of(MASKED_LOGIT)
            }
        })
        .collect();
    softmax_in_place(&mut logits, F::one() / F::of(query.len() as f64).sqrt());
    Ok(logits)
}

/// `c = Σ_i alpha_i · v_i`.
pub fn aggregate<F: Scalar>(alpha: &[F], values: &Tensor<F>) -> Result<Vec<F>> {
    if alpha.len() != values.rows() {
        return shape_err("aggregate", &[alpha.len()], values.shape());
    }
    let mut out = vec![F::zero(); values.cols()];
    for (i, &a) in alpha.iter().enumerate() {
        for (o, &v) in out.iter_mut().zip(values.row(i)) {
            *o += a * v;
        }
    }
    Ok(out)
}

/// Mean of the unmasked values; zero when nothing is unmasked.
pub fn mean_pool<F: Scalar>(values: &Tensor<F>, senders: &[bool]) -> Result<Vec<F>> {
    if senders.len() != values.rows() {
        return shape_err("mean_pool", &[senders.len()], values.shape());
    }
    let mut out = vec![F::zero(); values.cols()];
    let count = senders.iter().filter(|&&s| s).count();
    if count == 0 {
        return Ok(out);
    }
    for (i, _) in senders.iter().enumerate().filter(|(_, &s)| s) {
        for (o, &v) in out.iter_mut().zip(values.row(i)) {
            *o += v;
        }
    }
    let inv = F::one() / F::of(count as f64);
    out.iter_mut().for_each(|o| *o *= inv);
    Ok(out)
}

/// `h' = tanh([c ‖ h]·W)` with `W` of shape `(d_v + hidden) × hidden`.
pub fn multi_round_update<F: Scalar>(context: &[F], hidden: &[F], weight: &Tensor<F>) -> Result<Vec<F>> {
    let input = context.len() + hidden.len();
    if weight.shape() != [input, hidden.len()] {
        return shape_err("multi_round_update", weight.shape(), &[input, hidden.len()]);
    }
    let x: Vec<F> = context.iter().chain(hidden).copied().collect();
    Ok((0..hidden.len())
        .map(|j| x.iter().enumerate().map(|(i, &xi)| xi * weight.at(i, j)).sum::<F>().tanh())
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    /// `gate ~ Bernoulli(σ(logit))`.
    Sample,
    /// `gate = σ(logit) > 0.5`.
    Threshold,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateDecision {
    pub open: Vec<bool>,
    /// Log-probability of each decision under `Bernoulli(σ(logit))`.
    pub log_probs: Vec<f64>,
}

/// Hard per-agent send/no-send decisions.
pub fn gate_messages<F: Scalar>(logits: &[F], mode: GateMode, rng: &mut impl Rng) -> GateDecision {
    let mut open = Vec::with_capacity(logits.len());
    let mut log_probs = Vec::with_capacity(logits.len());
    for &l in logits {
        let l = l.as_f64();
        let p = sigmoid(l);
        let on = match mode {
            GateMode::Sample => rng.gen::<f64>() < p,
            GateMode::Threshold => p > 0.5,
        };
        open.push(on);
        log_probs.push(if on { log_sigmoid(l) } else { log_sigmoid(-l) });
    }
    GateDecision { open, log_probs }
}

/// Batch geometry: `batch` environments with `agents` slots each, stacked
/// row-wise as `batch * agents` rows (environment-major).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub batch: usize,
    pub agents: usize,
}

impl Layout {
    pub fn rows(&self) -> usize {
        self.batch * self.agents
    }
}

/// Per-row message projections for one round.
#[derive(Clone, Copy, Debug)]
pub struct Messages {
    pub signature: Option<Var>,
    pub query: Option<Var>,
    pub value: Var,
}

/// Result of a (possibly multi-round) exchange.
#[derive(Clone, Debug)]
pub struct Exchange<F> {
    /// Incoming message per row for the next timestep, `rows × d_v`.
    pub context: Var,
    /// Per round, `rows × agents`: row `b·N + j` holds receiver `j`'s weights
    /// over the senders of environment `b`.
    pub attention: Vec<Tensor<F>>,
}

/// Signature, query, value and round-update projections from the hidden state.
#[derive(Clone, Debug)]
pub struct CommHeads {
    cfg: CommConfig,
    signature: Option<Linear>,
    query: Option<Linear>,
    value: Linear,
    round_update: Option<Linear>,
}

impl CommHeads {
    pub fn specs(cfg: &CommConfig, hidden: usize) -> Vec<ParamSpec> {
        let mut v = Vec::new();
        if cfg.mode == CommMode::None {
            return v;
        }
        if cfg.mode == CommMode::Targeted {
            v.extend(Linear::specs("comm.signature", hidden, cfg.key_dim, true));
            v.extend(Linear::specs("comm.query", hidden, cfg.key_dim, true));
        }
        v.extend(Linear::specs("comm.value", hidden, cfg.value_dim, true));
        if cfg.rounds > 1 {
            v.extend(Linear::specs("comm.round_update", cfg.value_dim + hidden, hidden, false));
        }
        v
    }

    /// `None` when the mode is [`CommMode::None`].
    pub fn resolve<F: Scalar>(store: &ParamStore<F>, cfg: &CommConfig, hidden: usize) -> Result<Option<Self>> {
        if cfg.mode == CommMode::None {
            return Ok(None);
        }
        let targeted = cfg.mode == CommMode::Targeted;
        let sig = |name| Linear::resolve(store, name, hidden, cfg.key_dim, true);
        Ok(Some(Self {
            cfg: cfg.clone(),
            signature: if targeted { Some(sig("comm.signature")?) } else { None },
            query: if targeted { Some(sig("comm.query")?) } else { None },
            value: Linear::resolve(store, "comm.value", hidden, cfg.value_dim, true)?,
            round_update: if cfg.rounds > 1 {
                Some(Linear::resolve(store, "comm.round_update", cfg.value_dim + hidden, hidden, false)?)
            } else {
                None
            },
        }))
    }

    pub fn config(&self) -> &CommConfig {
        &self.cfg
    }

    pub fn round_update(&self) -> Option<&Linear> {
        self.round_update.as_ref()
    }

    pub fn messages<F: Scalar>(&self, tape: &mut Tape<F>, binds: &Bindings, h: Var) -> Result<Messages> {
        let signature = match &self.signature {
            Some(l) => Some(l.forward(tape, binds, h)?),
            None => None,
        };
        let query = match &self.query {
            Some(l) => Some(l.forward(tape, binds, h)?),
            None => None,
        };
        let value = self.value.forward(tape, binds, h)?;
        Ok(Messages {
            signature,
            query,
            value,
        })
    }

    /// Runs every communication round for a batch. `first` are the messages
    /// predicted from `hidden`; `senders` masks who may be attended to
    /// (alive and gate open) and `receivers` who gets a non-zero message.
    #[allow(clippy::too_many_arguments)]
    pub fn exchange<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        binds: &Bindings,
        hidden: Var,
        first: Messages,
        layout: Layout,
        senders: &[bool],
        receivers: &[bool],
    ) -> Result<Exchange<F>> {
        let rows = layout.rows();
        if senders.len() != rows || receivers.len() != rows || tape.value(hidden).rows() != rows {
            return shape_err("exchange", &[senders.len(), receivers.len()], &[rows]);
        }
        let mut attention = Vec::with_capacity(self.cfg.rounds);
        let mut msgs = first;
        let mut state = hidden;
        let mut context = self.round(tape, msgs, layout, senders, receivers, &mut attention)?;
        for _ in 1..self.cfg.rounds {
            let w = self.round_update.as_ref().expect("round update exists when rounds > 1");
            let cat = tape.concat(&[context, state])?;
            let pre = w.forward(tape, binds, cat)?;
            state = tape.tanh(pre)?;
            msgs = self.messages(tape, binds, state)?;
            context = self.round(tape, msgs, layout, senders, receivers, &mut attention)?;
        }
        Ok(Exchange { context, attention })
    }

    fn round<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        msgs: Messages,
        layout: Layout,
        senders: &[bool],
        receivers: &[bool],
        log: &mut Vec<Tensor<F>>,
    ) -> Result<Var> {
        let rows = layout.rows();
        let n = layout.agents;
        let (weights, context) = match (self.cfg.mode, msgs.signature, msgs.query) {
            (CommMode::Targeted, Some(k), Some(q)) => {
                let (bias, valid) = attention_masks::<F>(layout, senders, receivers, self.cfg.self_attention);
                let kt = tape.transpose(k)?;
                let logits = tape.matmul(q, kt)?;
                let logits = tape.add_const(logits, &bias)?;
                let scale = F::one() / F::of(self.cfg.key_dim as f64).sqrt();
                let alpha = tape.softmax(logits, scale)?;
                let alpha = tape.mul_const(alpha, &valid)?;
                let c = tape.matmul(alpha, msgs.value)?;
                (tape.value(alpha).clone(), c)
            }
            (CommMode::MeanPool, _, _) => {
                let pool = mean_pool_matrix::<F>(layout, senders, receivers);
                let p = tape.constant(pool.clone());
                let c = tape.matmul(p, msgs.value)?;
                (pool, c)
            }
            _ => return Err(Error::Contract("communication heads do not match the mode".into())),
        };
        let mut compact = vec![F::zero(); rows * n];
        for r in 0..rows {
            let b = r / n;
            compact[r * n..(r + 1) * n].copy_from_slice(&weights.row(r)[b * n..(b + 1) * n]);
        }
        log.push(Tensor::new(vec![rows, n], compact)?);
        Ok(context)
    }
}

/// Additive logit mask (`0` or [`MASKED_LOGIT`]) and row-validity mask for a
/// block-diagonal batched attention.
fn attention_masks<F: Scalar>(
    layout: Layout,
    senders: &[bool],
    receivers: &[bool],
    self_attention: bool,
) -> (Tensor<F>, Tensor<F>) {
    let rows = layout.rows();
    let n = layout.agents;
    let mut bias = vec![F::of(MASKED_LOGIT); rows * rows];
    let mut valid = vec![F::zero(); rows * rows];
    for r in 0..rows {
        let base = (r / n) * n;
        let mut any = false;
        for s in base..base + n {
            if senders[s] && (self_attention || s != r) {
                bias[r * rows + s] = F::zero();
                any = true;
            }
        }
        if !any && senders[r] {
            bias[r * rows + r] = F::zero();
            any = true;
        }
        if any && receivers[r] {
            valid[r * rows..(r + 1) * rows].iter_mut().for_each(|v| *v = F::one());
        }
    }
    (
        Tensor::new(vec![rows, rows], bias).expect("square"),
        Tensor::new(vec![rows, rows], valid).expect("square"),
    )
}

fn mean_pool_matrix<F: Scalar>(layout: Layout, senders: &[bool], receivers: &[bool]) -> Tensor<F> {
    let rows = layout.rows();
    let n = layout.agents;
    let mut m = vec![F::zero(); rows * rows];
    for b in 0..layout.batch {
        let block = b * n..(b + 1) * n;
        let count = senders[block.clone()].iter().filter(|&&s| s).count();
        if count == 0 {
            continue;
        }
        let w = F::one() / F::of(count as f64);
        for r in block.clone().filter(|&r| receivers[r]) {
            for s in block.clone().filter(|&s| senders[s]) {
                m[r * rows + s] = w;
            }
        }
    }
    Tensor::new(vec![rows, rows], m).expect("square")
}
