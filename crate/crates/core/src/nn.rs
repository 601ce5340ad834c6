//! Parameter registry, linear and GRU layers, and the RMSProp optimizer.
//!
//! Layers do not own their weights. They hold [`ParamId`]s into a
//! [`ParamStore`]; each forward pass binds the store onto a fresh [`Tape`]
//! and the resulting leaf gradients are folded back with
//! [`ParamStore::accumulate_grads`].

use indexmap::IndexMap;
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Name of the initialization scheme, recorded in checkpoint metadata.
pub const INIT_SCHEME: &str = "uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases except the gate bias";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Init {
    UniformFanIn(usize),
    Zeros,
    Constant(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn weight(name: impl Into<String>, fan_in: usize, fan_out: usize) -> Self {
        Self {
            name: name.into(),
            shape: vec![fan_in, fan_out],
            init: Init::UniformFanIn(fan_in),
        }
    }

    pub fn bias(name: impl Into<String>, width: usize) -> Self {
        Self {
            name: name.into(),
            shape: vec![width],
            init: Init::Zeros,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Param<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Option<Vec<F>>,
    /// RMSProp running average of squared gradients.
    pub sq_avg: Vec<F>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
    index: IndexMap<String, usize>,
}

/// Tape variables for every parameter of a store, in store order.
#[derive(Clone, Debug)]
pub struct Bindings(Vec<Var>);

impl Bindings {
    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        let sq_avg = vec![F::zero(); value.numel()];
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            value,
            grad: None,
            sq_avg,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    /// Looks up a parameter by name and checks its shape.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
        let actual = self.params[id.0].value.shape();
        if actual != shape {
            return shape_err("parameter", actual, shape);
        }
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<F> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    /// Places every parameter on the tape as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape<F>) -> Bindings {
        Bindings(self.params.iter().map(|p| tape.param(p.value.clone())).collect())
    }

    /// Places every parameter on the tape as a constant (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape<F>) -> Bindings {
        Bindings(self.params.iter().map(|p| tape.constant(p.value.clone())).collect())
    }

    /// Adds the tape's leaf gradients into the stored gradients. Parameters
    /// the backward pass did not reach receive zeros.
    pub fn accumulate_grads(&mut self, tape: &Tape<F>, bindings: &Bindings) {
        for (p, &var) in self.params.iter_mut().zip(&bindings.0) {
            let slot = p.grad.get_or_insert_with(|| vec![F::zero(); p.value.numel()]);
            if let Some(g) = tape.grad(var) {
                for (d, &s) in slot.iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|g| g.as_f64() * g.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales gradients so their global L2 norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = F::of(max_norm / norm);
            for g in self.params.iter_mut().filter_map(|p| p.grad.as_mut()) {
                for v in g.iter_mut() {
                    *v *= s;
                }
            }
        }
        norm
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(|g| g.iter().map(|x| G::of(x.as_f64())).collect()),
                    sq_avg: p.sq_avg.iter().map(|x| G::of(x.as_f64())).collect(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}

/// Builds a store from specs. Deterministic in `seed`; specs draw from one
/// stream in order.
pub fn init_params<F: Scalar>(specs: &[ParamSpec], seed: u64) -> Result<ParamStore<F>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for spec in specs {
        let numel = spec.shape.iter().product::<usize>();
        let data = match spec.init {
            Init::Zeros => vec![F::zero(); numel],
            Init::Constant(c) => vec![F::of(c); numel],
            Init::UniformFanIn(fan_in) => {
                if fan_in == 0 {
                    return Err(Error::Contract(format!("fan_in of `{}` is zero", spec.name)));
                }
                let bound = 1.0 / (fan_in as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound);
                (0..numel).map(|_| F::of(dist.sample(&mut rng))).collect()
            }
        };
        store.insert(spec.name.clone(), Tensor::new(spec.shape.clone(), data)?)?;
    }
    Ok(store)
}

/// Fully connected layer `x·W + b`, with `W` stored as `input × output`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn specs(name: &str, input: usize, output: usize, bias: bool) -> Vec<ParamSpec> {
        let mut v = vec![ParamSpec::weight(format!("{name}.weight"), input, output)];
        if bias {
            v.push(ParamSpec::bias(format!("{name}.bias"), output));
        }
        v
    }

    pub fn resolve<F: Scalar>(
        store: &ParamStore<F>,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.expect(&format!("{name}.weight"), &[input, output])?;
        let bias = if bias {
            Some(store.expect(&format!("{name}.bias"), &[output])?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            input,
            output,
        })
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, binds: &Bindings, x: Var) -> Result<Var> {
        if tape.value(x).cols() != self.input {
            return shape_err("linear", tape.value(x).shape(), &[self.input, self.output]);
        }
        let y = tape.matmul(x, binds.get(self.weight))?;
        match self.bias {
            Some(b) => tape.add_bias(y, binds.get(b)),
            None => Ok(y),
        }
    }
}

/// Single-layer GRU cell.
///
/// ```text
/// z  = σ([x ‖ h]·W_z + b_z)
/// r  = σ([x ‖ h]·W_r + b_r)
/// h̃  = tanh([x ‖ r⊙h]·W_h + b_h)
/// h' = (1 − z)⊙h + z⊙h̃
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    pub input: usize,
    pub hidden: usize,
    update: Linear,
    reset: Linear,
    candidate: Linear,
}

impl GruCell {
    pub fn specs(name: &str, input: usize, hidden: usize) -> Vec<ParamSpec> {
        let mut v = Linear::specs(&format!("{name}.update"), input + hidden, hidden, true);
        v.extend(Linear::specs(&format!("{name}.reset"), input + hidden, hidden, true));
        v.extend(Linear::specs(&format!("{name}.candidate"), input + hidden, hidden, true));
        v
    }

    pub fn resolve<F: Scalar>(store: &ParamStore<F>, name: &str, input: usize, hidden: usize) -> Result<Self> {
        let cat = input + hidden;
        Ok(Self {
            input,
            hidden,
            update: Linear::resolve(store, &format!("{name}.update"), cat, hidden, true)?,
            reset: Linear::resolve(store, &format!("{name}.reset"), cat, hidden, true)?,
            candidate: Linear::resolve(store, &format!("{name}.candidate"), cat, hidden, true)?,
        })
    }

    pub fn step<F: Scalar>(&self, tape: &mut Tape<F>, binds: &Bindings, x: Var, h: Var) -> Result<Var> {
        let (xv, hv) = (tape.value(x), tape.value(h));
        if xv.cols() != self.input || hv.cols() != self.hidden || xv.rows() != hv.rows() {
            return shape_err("gru_step", xv.shape(), hv.shape());
        }
        let xh = tape.concat(&[x, h])?;
        let z = self.update.forward(tape, binds, xh)?;
        let z = tape.sigmoid(z)?;
        let r = self.reset.forward(tape, binds, xh)?;
        let r = tape.sigmoid(r)?;
        let rh = tape.mul(r, h)?;
        let xrh = tape.concat(&[x, rh])?;
        let cand = self.candidate.forward(tape, binds, xrh)?;
        let cand = tape.tanh(cand)?;
        let keep = tape.affine(z, -F::one(), F::one());
        let kept = tape.mul(keep, h)?;
        let fresh = tape.mul(z, cand)?;
        tape.add(kept, fresh)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsProp {
    pub lr: f64,
    pub alpha: f64,
    pub eps: f64,
}

impl Default for RmsProp {
    fn default() -> Self {
        Self {
            lr: 7e-4,
            alpha: 0.99,
            eps: 1e-5,
        }
    }
}

impl RmsProp {
    /// `v ← α·v + (1−α)·g²; θ ← θ − lr·g/(√v + eps)`, then clears gradients.
    pub fn step<F: Scalar>(&self, store: &mut ParamStore<F>) -> Result<()> {
        if let Some(p) = store.params.iter().find(|p| p.grad.is_none()) {
            return Err(Error::Contract(format!("parameter `{}` has no gradient", p.name)));
        }
        let (lr, alpha, eps) = (F::of(self.lr), F::of(self.alpha), F::of(self.eps));
        let one_minus = F::one() - alpha;
        for p in &mut store.params {
            let g = p.grad.take().expect("checked above");
            for ((theta, v), g) in p.value.data_mut().iter_mut().zip(p.sq_avg.iter_mut()).zip(g) {
                *v = alpha * *v + one_minus * g * g;
                *theta -= lr * g / (v.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn gru_store(input: usize, hidden: usize, seed: u64) -> (GruCell, ParamStore<f64>) {
        let store = init_params(&GruCell::specs("gru", input, hidden), seed).unwrap();
        let cell = GruCell::resolve(&store, "gru", input, hidden).unwrap();
        (cell, store)
    }

    /// Scalar-loop GRU oracle over plain vectors.
    fn gru_oracle(store: &ParamStore<f64>, x: &[f64], h: &[f64]) -> Vec<f64> {
        let hid = h.len();
        let lin = |name: &str, inp: &[f64]| -> Vec<f64> {
            let w = &store.get(store.id(&format!("gru.{name}.weight")).unwrap()).value;
            let b = &store.get(store.id(&format!("gru.{name}.bias")).unwrap()).value;
            (0..hid)
                .map(|j| b.data()[j] + (0..inp.len()).map(|i| inp[i] * w.at(i, j)).sum::<f64>())
                .collect()
        };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let xh: Vec<f64> = x.iter().chain(h).copied().collect();
        let z: Vec<f64> = lin("update", &xh).into_iter().map(sig).collect();
        let r: Vec<f64> = lin("reset", &xh).into_iter().map(sig).collect();
        let xrh: Vec<f64> = x.iter().copied().chain(r.iter().zip(h).map(|(a, b)| a * b)).collect();
        let cand: Vec<f64> = lin("candidate", &xrh).into_iter().map(f64::tanh).collect();
        (0..hid).map(|j| (1.0 - z[j]) * h[j] + z[j] * cand[j]).collect()
    }

    fn zero_store(store: &mut ParamStore<f64>) {
        for p in store.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn linear_trivial_cases() {
        let mut store = init_params::<f64>(&Linear::specs("l", 2, 2, true), 1).unwrap();
        let lin = Linear::resolve(&store, "l", 2, 2, true).unwrap();
        zero_store(&mut store);
        store.get_mut(lin.bias.unwrap()).value = Tensor::vector(vec![1.0, 2.0]);
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let x = t.constant(Tensor::from_rows(&[&[5.0, -3.0]]).unwrap());
        let y = lin.forward(&mut t, &b, x).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 2.0]);

        store.get_mut(lin.weight).value = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        store.get_mut(lin.bias.unwrap()).value = Tensor::vector(vec![0.0, 0.0]);
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let x = t.constant(Tensor::from_rows(&[&[5.0, -3.0]]).unwrap());
        let y = lin.forward(&mut t, &b, x).unwrap();
        assert_eq!(t.value(y).data(), &[5.0, -3.0]);

        let bad = t.constant(Tensor::zeros(&[1, 3]));
        assert!(lin.forward(&mut t, &b, bad).is_err());
    }

    #[test]
    fn linear_matches_triple_loop() {
        let store = init_params::<f64>(&Linear::specs("l", 5, 3, true), 9).unwrap();
        let mut store = store;
        let lin = Linear::resolve(&store, "l", 5, 3, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        store.get_mut(lin.bias.unwrap()).value = Tensor::vector((0..3).map(|_| rng.gen()).collect());
        let x: Vec<f64> = (0..20).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let xv = t.constant(Tensor::matrix(4, 5, x.clone()).unwrap());
        let y = lin.forward(&mut t, &b, xv).unwrap();
        let w = &store.get(lin.weight).value;
        let bias = &store.get(lin.bias.unwrap()).value;
        for r in 0..4 {
            for c in 0..3 {
                let mut acc = 0.0;
                for k in 0..5 {
                    acc += x[r * 5 + k] * w.at(k, c);
                }
                acc += bias.data()[c];
                assert!((t.value(y).at(r, c) - acc).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn gru_zero_weights_halve_hidden() {
        let (cell, mut store) = gru_store(3, 2, 0);
        zero_store(&mut store);
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let x = t.constant(Tensor::from_rows(&[&[0.3, -1.0, 2.0]]).unwrap());
        let h = t.constant(Tensor::from_rows(&[&[2.0, 4.0]]).unwrap());
        let out = cell.step(&mut t, &b, x, h).unwrap();
        assert_eq!(t.value(out).data(), &[1.0, 2.0]);
    }

    #[test]
    fn gru_zero_input_and_state_stays_zero() {
        let (cell, mut store) = gru_store(3, 4, 5);
        for p in store.iter_mut().filter(|p| p.name.ends_with("bias")) {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let x = t.constant(Tensor::zeros(&[2, 3]));
        let h = t.constant(Tensor::zeros(&[2, 4]));
        let out = cell.step(&mut t, &b, x, h).unwrap();
        assert!(t.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gru_matches_scalar_oracle() {
        let (cell, store) = gru_store(4, 6, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let xv = t.constant(Tensor::matrix(2, 4, x.clone()).unwrap());
        let hv = t.constant(Tensor::matrix(2, 6, h.clone()).unwrap());
        let out = cell.step(&mut t, &b, xv, hv).unwrap();
        for r in 0..2 {
            let expect = gru_oracle(&store, &x[r * 4..r * 4 + 4], &h[r * 6..r * 6 + 6]);
            for (a, e) in t.value(out).row(r).iter().zip(&expect) {
                assert!((a - e).abs() < 1e-10);
            }
        }
        let bad = t.constant(Tensor::zeros(&[2, 5]));
        assert!(cell.step(&mut t, &b, xv, bad).is_err());
    }

    #[test]
    fn gru_gradients_match_finite_differences() {
        let (cell, store) = gru_store(3, 4, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = Tensor::matrix(2, 3, (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let h = Tensor::matrix(2, 4, (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let w = Tensor::matrix(2, 4, (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let loss = |store: &ParamStore<f64>, x: &Tensor<f64>, h: &Tensor<f64>| -> (f64, Tape<f64>, Bindings, Var, Var) {
            let mut t = Tape::new();
            let b = store.bind(&mut t);
            let xv = t.param(x.clone());
            let hv = t.param(h.clone());
            let out = cell.step(&mut t, &b, xv, hv).unwrap();
            let m = t.mul_const(out, &w).unwrap();
            let l = t.sum(m);
            t.backward(l).unwrap();
            (t.value(l).item().unwrap(), t, b, xv, hv)
        };
        let (_, tape, binds, xv, hv) = loss(&store, &x, &h);
        let eps = 1e-5;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-3);
        for i in 0..x.numel() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[i] += eps;
            xm.data_mut()[i] -= eps;
            let n = (loss(&store, &xp, &h).0 - loss(&store, &xm, &h).0) / (2.0 * eps);
            assert!(rel(tape.grad(xv).unwrap()[i], n) < 1e-4);
        }
        for i in 0..h.numel() {
            let (mut hp, mut hm) = (h.clone(), h.clone());
            hp.data_mut()[i] += eps;
            hm.data_mut()[i] -= eps;
            let n = (loss(&store, &x, &hp).0 - loss(&store, &x, &hm).0) / (2.0 * eps);
            assert!(rel(tape.grad(hv).unwrap()[i], n) < 1e-4);
        }
        for (pi, p) in store.iter().enumerate() {
            let var = binds.0[pi];
            for i in 0..p.value.numel() {
                let mut sp = store.clone();
                sp.params[pi].value.data_mut()[i] += eps;
                let mut sm = store.clone();
                sm.params[pi].value.data_mut()[i] -= eps;
                let n = (loss(&sp, &x, &h).0 - loss(&sm, &x, &h).0) / (2.0 * eps);
                assert!(rel(tape.grad(var).unwrap()[i], n) < 1e-4, "{} [{i}]", p.name);
            }
        }
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let specs = vec![ParamSpec::weight("w", 100, 50), ParamSpec::bias("b", 50)];
        let a = init_params::<f32>(&specs, 42).unwrap();
        let b = init_params::<f32>(&specs, 42).unwrap();
        for (p, q) in a.iter().zip(b.iter()) {
            assert_eq!(p.value, q.value);
        }
        let w = &a.get(a.id("w").unwrap()).value;
        assert!(w.data().iter().all(|v| (-0.1..=0.1).contains(v)));
        assert!(a.get(a.id("b").unwrap()).value.data().iter().all(|&v| v == 0.0));
        let c = init_params::<f32>(&specs, 43).unwrap();
        assert_ne!(a.get(a.id("w").unwrap()).value, c.get(c.id("w").unwrap()).value);
    }

    #[test]
    fn init_mean_is_centered() {
        // 10^4 draws from U(-b, b): standard error = b / sqrt(3 * 10^4).
        let store = init_params::<f64>(&[ParamSpec::weight("w", 100, 100)], 5).unwrap();
        let data = store.get(store.id("w").unwrap()).value.data();
        let mean = data.iter().sum::<f64>() / data.len() as f64;
        let se = 0.1 / (3.0 * data.len() as f64).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn duplicate_names_rejected() {
        let specs = vec![ParamSpec::bias("b", 2), ParamSpec::bias("b", 2)];
        assert!(init_params::<f64>(&specs, 0).is_err());
    }

    fn single(value: f64, grad: Option<f64>) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.insert("p", Tensor::vector(vec![value])).unwrap();
        s.get_mut(id).grad = grad.map(|g| vec![g]);
        s
    }

    #[test]
    fn rmsprop_zero_grad_is_noop() {
        let mut s = single(1.5, Some(0.0));
        RmsProp::default().step(&mut s).unwrap();
        assert_eq!(s.iter().next().unwrap().value.data(), &[1.5]);
        assert!(s.iter().next().unwrap().grad.is_none());
    }

    #[test]
    fn rmsprop_single_step_by_hand() {
        let mut s = single(0.0, Some(1.0));
        RmsProp::default().step(&mut s).unwrap();
        let p = s.iter().next().unwrap();
        assert!((p.sq_avg[0] - 0.01).abs() < 1e-15);
        let expected = -7e-4 / (0.1 + 1e-5);
        assert!((p.value.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn rmsprop_two_steps_follow_recurrence() {
        let mut s = single(0.0, Some(1.0));
        let opt = RmsProp::default();
        opt.step(&mut s).unwrap();
        s.iter_mut().next().unwrap().grad = Some(vec![1.0]);
        opt.step(&mut s).unwrap();
        let v1: f64 = 0.01;
        let v2 = 0.99 * v1 + 0.01;
        let theta = -7e-4 / (v1.sqrt() + 1e-5) - 7e-4 / (f64::sqrt(v2) + 1e-5);
        let p = s.iter().next().unwrap();
        assert!((p.sq_avg[0] - v2).abs() < 1e-15);
        assert!((p.value.data()[0] - theta).abs() < 1e-15);
    }

    #[test]
    fn rmsprop_zero_lr_updates_accumulator_only() {
        let mut s = single(2.0, Some(3.0));
        RmsProp { lr: 0.0, ..RmsProp::default() }.step(&mut s).unwrap();
        let p = s.iter().next().unwrap();
        assert_eq!(p.value.data(), &[2.0]);
        assert!((p.sq_avg[0] - 0.09).abs() < 1e-12);
    }

    #[test]
    fn rmsprop_missing_grad_is_contract_error() {
        let mut s = single(2.0, None);
        assert!(matches!(RmsProp::default().step(&mut s), Err(Error::Contract(_))));
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut s = single(0.0, Some(4.0));
        let before = s.clip_grad_norm(1.0);
        assert_eq!(before, 4.0);
        assert!((s.grad_norm() - 1.0).abs() < 1e-12);
    }
}
