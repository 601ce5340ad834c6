//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! Every operation appends a node to the [`Tape`] and returns a [`Var`]
//! handle. Nodes are only ever appended, so node order is a topological
//! order and [`Tape::backward`] is a single reverse sweep.
//!
//! Broadcasting is explicit: apart from [`Tape::add_bias`] (bias over the
//! leading rows) every binary op requires identical shapes.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{softmax_in_place, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Sigmoid,
    Relu,
    Log,
    Exp,
    Square,
    Neg,
    /// `log σ(x)`, computed stably.
    LogSigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    AddBias(Var, Var),
    Affine(Var, F),
    MulConst(Var, Vec<F>),
    AddConst(Var),
    Softmax(Var, F),
    LogSoftmax(Var),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Gather(Var, Vec<usize>),
    RowSum(Var),
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
    /// Accumulated gradient; only kept for leaves.
    grad: Option<Vec<F>>,
}

/// Records operations for one forward pass. Confined to a single thread.
#[derive(Debug, Default)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if a backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Copies a node's current value into a new constant leaf (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = crate::tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.shape().len() != 2 {
            return shape_err("transpose", x.shape(), &[0, 0]);
        }
        let (m, n) = (x.shape()[0], x.shape()[1]);
        let src = x.data();
        let mut data = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let out = Tensor::new(vec![n, m], data)?;
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let x = self.value(a);
        let out = match kind {
            Unary::Tanh => x.map(|v| v.tanh()),
            Unary::Sigmoid => x.map(sigmoid),
            Unary::Relu => x.map(|v| v.max(F::zero())),
            Unary::Log => {
                if let Some(bad) = x.data().iter().find(|v| **v <= F::zero()) {
                    return Err(Error::Domain {
                        op: "log",
                        detail: format!("non-positive input {bad}"),
                    });
                }
                x.map(|v| v.ln())
            }
            Unary::Exp => x.map(|v| v.exp()),
            Unary::Square => x.map(|v| v * v),
            Unary::Neg => x.map(|v| -v),
            Unary::LogSigmoid => x.map(log_sigmoid),
        };
        Ok(self.push(out, Op::Unary(kind, a), &[a]))
    }

    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return shape_err("elementwise", x.shape(), y.shape());
        }
        let f = match kind {
            Binary::Add => |p: F, q: F| p + q,
            Binary::Sub => |p: F, q: F| p - q,
            Binary::Mul => |p: F, q: F| p * q,
        };
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Binary(kind, a, b), &[a, b]))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Relu, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    /// `x + bias`, with `bias` (length = columns of `x`) repeated over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let cols = xv.cols();
        if bv.numel() != cols {
            return shape_err("add_bias", xv.shape(), bv.shape());
        }
        let b = bv.data();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(cols) {
            for (v, &bj) in row.iter_mut().zip(b) {
                *v += bj;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddBias(x, bias), &[x, bias]))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: F, shift: F) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push(out, Op::Affine(x, scale), &[x])
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: Var, c: &Tensor<F>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != c.shape() {
            return shape_err("mul_const", xv.shape(), c.shape());
        }
        let data = xv.data().iter().zip(c.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::MulConst(x, c.data().to_vec()), &[x]))
    }

    /// Elementwise sum with a constant tensor of the same shape.
    pub fn add_const(&mut self, x: Var, c: &Tensor<F>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != c.shape() {
            return shape_err("add_const", xv.shape(), c.shape());
        }
        let data = xv.data().iter().zip(c.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddConst(x), &[x]))
    }

    /// Row-wise `softmax(scale * x)` over the last dimension.
    pub fn softmax(&mut self, x: Var, scale: F) -> Result<Var> {
        if scale <= F::zero() {
            return Err(Error::Domain {
                op: "softmax",
                detail: format!("scale must be positive, got {scale}"),
            });
        }
        let out = crate::tensor::softmax_rows(self.value(x), scale);
        Ok(self.push(out, Op::Softmax(x, scale), &[x]))
    }

    /// Row-wise `log softmax(x)` over the last dimension.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(cols) {
            let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::LogSoftmax(x), &[x])
    }

    /// Concatenation along the last dimension; all parts share the row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let rows = self.value(*first).rows();
        for p in parts {
            let v = self.value(*p);
            if v.rows() != rows {
                return shape_err("concat", self.value(*first).shape(), v.shape());
            }
        }
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(out, Op::Concat(parts.to_vec()), parts))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if start >= end || end > xv.cols() {
            return shape_err("slice_cols", xv.shape(), &[start, end]);
        }
        let rows = xv.rows();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&xv.row(r)[start..end]);
        }
        let out = Tensor::new(vec![rows, end - start], data)?;
        Ok(self.push(out, Op::SliceCols(x, start), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<F>();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<F>() / F::of(v.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Picks `x[r, index[r]]` for every row, producing a vector.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if index.len() != xv.rows() || index.iter().any(|&i| i >= xv.cols()) {
            return shape_err("gather", xv.shape(), &[index.len()]);
        }
        let data = index.iter().enumerate().map(|(r, &c)| xv.at(r, c)).collect();
        let out = Tensor::vector(data);
        Ok(self.push(out, Op::Gather(x, index.to_vec()), &[x]))
    }

    /// Sum over the last dimension, producing one value per row.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = (0..xv.rows()).map(|r| xv.row(r).iter().copied().sum()).collect();
        self.push(Tensor::vector(data), Op::RowSum(x), &[x])
    }

    /// Reverse sweep from a scalar loss. Leaf gradients accumulate across
    /// calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![F::one()]);
        let mut leaf_grads = Vec::new();

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let nodes = &self.nodes;
            let mut acc = |v: Var, f: &mut dyn FnMut(&mut [F])| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                let slot = grads[v.0].get_or_insert_with(|| vec![F::zero(); nodes[v.0].value.numel()]);
                f(slot);
            };
            let y = node.value.data();
            match &node.op {
                Op::Leaf => leaf_grads.push((id, g)),
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    acc(*a, &mut |ga| {
                        // ga += g · bᵀ
                        F::gemm(m, n, k, F::one(), &g, n as isize, 1, bv.data(), 1, n as isize,
                            F::one(), ga, k as isize, 1);
                    });
                    acc(*b, &mut |gb| {
                        // gb += aᵀ · g
                        F::gemm(k, m, n, F::one(), av.data(), 1, k as isize, &g, n as isize, 1,
                            F::one(), gb, n as isize, 1);
                    });
                }
                Op::Transpose(a) => {
                    let (m, n) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                    acc(*a, &mut |ga| {
                        for i in 0..m {
                            for j in 0..n {
                                ga[i * n + j] += g[j * m + i];
                            }
                        }
                    });
                }
                Op::Unary(kind, a) => {
                    let x = nodes[a.0].value.data();
                    acc(*a, &mut |ga| {
                        for i in 0..ga.len() {
                            let d = match kind {
                                Unary::Tanh => F::one() - y[i] * y[i],
                                Unary::Sigmoid => y[i] * (F::one() - y[i]),
                                Unary::Relu => {
                                    if x[i] > F::zero() {
                                        F::one()
                                    } else {
                                        F::zero()
                                    }
                                }
                                Unary::Log => F::one() / x[i],
                                Unary::Exp => y[i],
                                Unary::Square => F::of(2.0) * x[i],
                                Unary::Neg => -F::one(),
                                Unary::LogSigmoid => sigmoid(-x[i]),
                            };
                            ga[i] += g[i] * d;
                        }
                    });
                }
                Op::Binary(kind, a, b) => {
                    let (xa, xb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    match kind {
                        Binary::Add => {
                            acc(*a, &mut |ga| add_into(ga, &g));
                            acc(*b, &mut |gb| add_into(gb, &g));
                        }
                        Binary::Sub => {
                            acc(*a, &mut |ga| add_into(ga, &g));
                            acc(*b, &mut |gb| {
                                for (d, &s) in gb.iter_mut().zip(g.iter()) {
                                    *d -= s;
                                }
                            });
                        }
                        Binary::Mul => {
                            acc(*a, &mut |ga| {
                                for i in 0..ga.len() {
                                    ga[i] += g[i] * xb[i];
                                }
                            });
                            acc(*b, &mut |gb| {
                                for i in 0..gb.len() {
                                    gb[i] += g[i] * xa[i];
                                }
                            });
                        }
                    }
                }
                Op::AddBias(x, b) => {
                    acc(*x, &mut |gx| add_into(gx, &g));
                    let cols = nodes[b.0].value.numel();
                    acc(*b, &mut |gb| {
                        for row in g.chunks(cols) {
                            add_into(gb, row);
                        }
                    });
                }
                Op::Affine(x, scale) => {
                    acc(*x, &mut |gx| {
                        for (d, &s) in gx.iter_mut().zip(g.iter()) {
                            *d += *scale * s;
                        }
                    });
                }
                Op::MulConst(x, c) => {
                    acc(*x, &mut |gx| {
                        for i in 0..gx.len() {
                            gx[i] += g[i] * c[i];
                        }
                    });
                }
                Op::AddConst(x) | Op::Reshape(x) => acc(*x, &mut |gx| add_into(gx, &g)),
                Op::Softmax(x, scale) => {
                    let cols = node.value.cols();
                    acc(*x, &mut |gx| {
                        for ((gr, yr), dr) in g.chunks(cols).zip(y.chunks(cols)).zip(gx.chunks_mut(cols)) {
                            let dot: F = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                            for j in 0..cols {
                                dr[j] += *scale * yr[j] * (gr[j] - dot);
                            }
                        }
                    });
                }
                Op::LogSoftmax(x) => {
                    let cols = node.value.cols();
                    acc(*x, &mut |gx| {
                        for ((gr, yr), dr) in g.chunks(cols).zip(y.chunks(cols)).zip(gx.chunks_mut(cols)) {
                            let total: F = gr.iter().copied().sum();
                            for j in 0..cols {
                                dr[j] += gr[j] - yr[j].exp() * total;
                            }
                        }
                    });
                }
                Op::Concat(parts) => {
                    let total = node.value.cols();
                    let mut offset = 0;
                    for p in parts {
                        let w = nodes[p.0].value.cols();
                        acc(*p, &mut |gp| {
                            for (dr, gr) in gp.chunks_mut(w).zip(g.chunks(total)) {
                                add_into(dr, &gr[offset..offset + w]);
                            }
                        });
                        offset += w;
                    }
                }
                Op::SliceCols(x, start) => {
                    let width = node.value.cols();
                    let cols = nodes[x.0].value.cols();
                    acc(*x, &mut |gx| {
                        for (dr, gr) in gx.chunks_mut(cols).zip(g.chunks(width)) {
                            add_into(&mut dr[*start..*start + width], gr);
                        }
                    });
                }
                Op::Sum(x) => acc(*x, &mut |gx| {
                    for d in gx.iter_mut() {
                        *d += g[0];
                    }
                }),
                Op::Mean(x) => acc(*x, &mut |gx| {
                    let s = g[0] / F::of(gx.len() as f64);
                    for d in gx.iter_mut() {
                        *d += s;
                    }
                }),
                Op::Gather(x, index) => {
                    let cols = nodes[x.0].value.cols();
                    acc(*x, &mut |gx| {
                        for (r, &c) in index.iter().enumerate() {
                            gx[r * cols + c] += g[r];
                        }
                    });
                }
                Op::RowSum(x) => {
                    let cols = nodes[x.0].value.cols();
                    acc(*x, &mut |gx| {
                        for (r, row) in gx.chunks_mut(cols).enumerate() {
                            for d in row.iter_mut() {
                                *d += g[r];
                            }
                        }
                    });
                }
            }
        }

        for (id, g) in leaf_grads {
            match &mut self.nodes[id].grad {
                Some(existing) => add_into(existing, &g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn log_sigmoid<F: Scalar>(x: F) -> F {
    // log σ(x) = -softplus(-x)
    if x >= F::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Convenience for tests and small programs: softmax of a plain vector.
pub fn softmax_vec<F: Scalar>(x: &[F], scale: F) -> Vec<F> {
    let mut out = x.to_vec();
    softmax_in_place(&mut out, scale);
    out
}
