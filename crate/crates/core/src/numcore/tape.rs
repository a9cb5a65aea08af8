//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node holding its output value. `backward` walks the
//! nodes in reverse creation order exactly once, so the tape is a valid
//! topological order by construction.

use std::collections::HashMap;

use super::kernels::{depthwise_conv, matmul_a_bt_acc, matmul_acc, matmul_at_b_acc};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{sigmoid, softplus, Scalar};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-defined differentiable operation.
pub trait CustomOp<S>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one gradient buffer per input, each the length of that input.
    fn backward(&self, inputs: &[&Tensor<S>], output: &Tensor<S>, grad_out: &[S]) -> Vec<Vec<S>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Relu,
    Silu,
    Softplus,
    Exp,
    Neg,
}

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, S),
    MulConst(Var, Vec<S>),
    Unary(Var, Unary),
    Glu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Softmax(Var),
    MaskFill(Var, Vec<bool>),
    DepthwiseConv {
        x: Var,
        kernel: Var,
        pad_left: usize,
    },
    ReverseRows(Var),
    Reshape(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    WeightedSum {
        w: Var,
        xs: Vec<Var>,
    },
    Sum(Var),
    Mean(Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<S>>,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Ordered record of executed operations.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

/// Gradients of the requires-grad leaves after [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    by_leaf: HashMap<Var, Vec<S>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of a leaf; zeros when the loss does not depend on it.
    pub fn get(&self, leaf: Var) -> Option<&[S]> {
        self.by_leaf.get(&leaf).map(Vec::as_slice)
    }

    pub fn take(&mut self, leaf: Var) -> Option<Vec<S>> {
        self.by_leaf.remove(&leaf)
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, a, b));
    }
    Ok(())
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, mut value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        value.grad = None;
        value.requires_grad = needs_grad;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn derived(&mut self, shape: &[usize], data: Vec<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let ng = self.needs(inputs);
        let value = Tensor::new(shape, data).expect("op produced consistent shape");
        self.push(value, op, ng)
    }

    /// Records a leaf; gradients are tracked when `t.requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        let rg = t.requires_grad;
        self.push(t, Op::Leaf, rg)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor<S>) -> Var {
        t.requires_grad = false;
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.derived(&[m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    fn binary(&mut self, a: Var, b: Var, mul: bool) -> Result<Var> {
        // Only exact-shape and single-element broadcast are supported.
        let (a, b) = if self.value(a).len() == 1 && self.value(b).len() != 1 {
            (b, a)
        } else {
            (a, b)
        };
        let (ta, tb) = (self.value(a), self.value(b));
        let name = if mul { "mul" } else { "add" };
        if tb.len() != 1 {
            same_shape(name, ta.shape(), tb.shape())?;
        }
        let data: Vec<S> = if tb.len() == 1 {
            let s = tb.item();
            ta.data().iter().map(|&x| if mul { x * s } else { x + s }).collect()
        } else {
            ta.data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| if mul { x * y } else { x + y })
                .collect()
        };
        let shape = ta.shape().to_vec();
        let op = if mul { Op::Mul(a, b) } else { Op::Add(a, b) };
        Ok(self.derived(&shape, data, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, false)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, true)
    }

    /// Adds a length-`n` row vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(row));
        let n = ta.cols();
        if tb.len() != n {
            return Err(Error::shape("add_row", ta.shape(), tb.shape()));
        }
        let data: Vec<S> = ta
            .data()
            .chunks(n)
            .flat_map(|r| r.iter().zip(tb.data()).map(|(&x, &y)| x + y))
            .collect();
        let shape = ta.shape().to_vec();
        Ok(self.derived(&shape, data, Op::AddRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| x * c).collect();
        let shape = t.shape().to_vec();
        self.derived(&shape, data, Op::Scale(a, c), &[a])
    }

    /// Elementwise product with a constant (non-differentiable) mask.
    pub fn mul_const(&mut self, a: Var, mask: Vec<S>) -> Result<Var> {
        let t = self.value(a);
        if mask.len() != t.len() {
            return Err(Error::shape("mul_const", t.shape(), &[mask.len()]));
        }
        let data = t.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let shape = t.shape().to_vec();
        Ok(self.derived(&shape, data, Op::MulConst(a, mask), &[a]))
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Var {
        let t = self.value(a);
        let data = t
            .data()
            .iter()
            .map(|&x| match f {
                Unary::Sigmoid => sigmoid(x),
                Unary::Relu => x.max(S::zero()),
                Unary::Silu => x * sigmoid(x),
                Unary::Softplus => softplus(x),
                Unary::Exp => x.exp(),
                Unary::Neg => -x,
            })
            .collect();
        let shape = t.shape().to_vec();
        self.derived(&shape, data, Op::Unary(a, f), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Silu)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Neg)
    }

    /// Gated linear unit over the last axis: first half ⊙ σ(second half).
    pub fn glu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = t.as_matrix_dims();
        if cols % 2 != 0 {
            return Err(Error::shape("glu", t.shape(), &[cols]));
        }
        let h = cols / 2;
        let mut data = Vec::with_capacity(rows * h);
        for r in t.data().chunks(cols) {
            for j in 0..h {
                data.push(r[j] * sigmoid(r[h + j]));
            }
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = h;
        Ok(self.derived(&shape, data, Op::Glu(a), &[a]))
    }

    /// Layer normalization over the last axis followed by a per-feature affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: S) -> Result<Var> {
        let t = self.value(x);
        let (rows, d) = t.as_matrix_dims();
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::shape("layer_norm", t.shape(), self.value(gain).shape()));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let dn = S::of(d as f64);
        let mut xhat = Vec::with_capacity(rows * d);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * d);
        for r in t.data().chunks(d) {
            let mean = r.iter().copied().sum::<S>() / dn;
            let var = r.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let rs = S::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (j, &v) in r.iter().enumerate() {
                let xh = (v - mean) * rs;
                xhat.push(xh);
                out.push(xh * g[j] + b[j]);
            }
        }
        let shape = t.shape().to_vec();
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        };
        Ok(self.derived(&shape, out, op, &[x, gain, bias]))
    }

    /// Softmax over all entries; `-inf` entries map to exactly zero.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = softmax_values(t.data())?;
        let shape = t.shape().to_vec();
        Ok(self.derived(&shape, out, Op::Softmax(x), &[x]))
    }

    /// Keeps entries where `keep` is true and replaces the rest with `-inf`.
    pub fn mask_fill_neg_inf(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let t = self.value(x);
        if keep.len() != t.len() {
            return Err(Error::shape("mask_fill", t.shape(), &[keep.len()]));
        }
        let out = t
            .data()
            .iter()
            .zip(keep)
            .map(|(&v, &k)| if k { v } else { S::neg_infinity() })
            .collect();
        let shape = t.shape().to_vec();
        Ok(self.derived(&shape, out, Op::MaskFill(x, keep.to_vec()), &[x]))
    }

    /// Depthwise convolution over time of `x[T×d]` with `kernel[k×d]`.
    /// `pad_left = (k-1)/2` gives symmetric "same" padding, `k-1` a causal filter.
    pub fn depthwise_conv1d(&mut self, x: Var, kernel: Var, pad_left: usize) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(kernel));
        if tx.rank() != 2 || tk.rank() != 2 || tx.cols() != tk.cols() || pad_left >= tk.rows() {
            return Err(Error::shape("depthwise_conv1d", tx.shape(), tk.shape()));
        }
        let (t, d) = tx.as_matrix_dims();
        let k = tk.rows();
        let out = depthwise_conv(tx.data(), tk.data(), t, d, k, pad_left);
        let op = Op::DepthwiseConv {
            x,
            kernel,
            pad_left,
        };
        Ok(self.derived(&[t, d], out, op, &[x, kernel]))
    }

    /// Reverses the row (time) order of a matrix.
    pub fn reverse_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.cols();
        let out: Vec<S> = t.data().chunks(c).rev().flatten().copied().collect();
        let shape = t.shape().to_vec();
        self.derived(&shape, out, Op::ReverseRows(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let data = t.into_data();
        Ok(self.derived(shape, data, Op::Reshape(x), &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.as_matrix_dims();
        if len == 0 || start + len > c {
            return Err(Error::shape("slice_cols", t.shape(), &[start, len]));
        }
        let out = t
            .data()
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        Ok(self.derived(&[r, len], out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x).slice_rows(start, len)?;
        let (shape, data) = (t.shape().to_vec(), t.into_data());
        Ok(self.derived(&shape, data, Op::SliceRows { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let rows = self.value(xs[0]).rows();
        if xs.iter().any(|&v| self.value(v).rows() != rows) {
            return Err(Error::shape("concat_cols", self.shape(xs[0]), self.shape(xs[xs.len() - 1])));
        }
        let total: usize = xs.iter().map(|&v| self.value(v).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &v in xs {
                out.extend_from_slice(self.value(v).row(r));
            }
        }
        Ok(self.derived(&[rows, total], out, Op::ConcatCols(xs.to_vec()), xs))
    }

    /// `Σ_l w[l] · xs[l]` for a weight vector `w` of length `xs.len()`.
    pub fn weighted_sum(&mut self, w: Var, xs: &[Var]) -> Result<Var> {
        let tw = self.value(w);
        if tw.len() != xs.len() || xs.is_empty() {
            return Err(Error::shape("weighted_sum", tw.shape(), &[xs.len()]));
        }
        let shape = self.shape(xs[0]).to_vec();
        let mut out = vec![S::zero(); self.value(xs[0]).len()];
        for (l, &x) in xs.iter().enumerate() {
            let tx = self.value(x);
            same_shape("weighted_sum", &shape, tx.shape())?;
            let wl = self.value(w).data()[l];
            if wl == S::zero() {
                continue;
            }
            for (o, &v) in out.iter_mut().zip(tx.data()) {
                *o = *o + wl * v;
            }
        }
        let mut inputs = vec![w];
        inputs.extend_from_slice(xs);
        let op = Op::WeightedSum { w, xs: xs.to_vec() };
        Ok(self.derived(&shape, out, op, &inputs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.derived(&[1], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / S::of(t.len() as f64);
        self.derived(&[1], vec![s], Op::Mean(x), &[x])
    }

    /// Records the output of a user-defined op.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<S>, op: Box<dyn CustomOp<S>>) -> Var {
        let ng = self.needs(inputs);
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            ng,
        )
    }

    /// Back-propagates from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<S>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        let mut by_leaf = HashMap::new();

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            let Some(g) = grads[i].take() else { continue };
            if !node.needs_grad {
                continue;
            }
            let val = |v: Var| &nodes[v.0].value;
            let mut acc = |v: Var, f: &mut dyn FnMut(&mut [S])| {
                if !nodes[v.0].needs_grad {
                    return;
                }
                let buf = grads[v.0].get_or_insert_with(|| vec![S::zero(); nodes[v.0].value.len()]);
                f(buf);
            };
            match &node.op {
                Op::Leaf => {
                    by_leaf.insert(Var(i), g);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    acc(*a, &mut |buf| matmul_a_bt_acc(&g, tb.data(), buf, m, k, n));
                    acc(*b, &mut |buf| matmul_at_b_acc(ta.data(), &g, buf, m, k, n));
                }
                Op::Add(a, b) => {
                    acc(*a, &mut |buf| add_into(buf, &g));
                    let broadcast = val(*b).len() == 1 && g.len() != 1;
                    acc(*b, &mut |buf| {
                        if broadcast {
                            buf[0] = buf[0] + g.iter().copied().sum();
                        } else {
                            add_into(buf, &g)
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    if tb.len() == 1 && g.len() != 1 {
                        let s = tb.item();
                        acc(*a, &mut |buf| {
                            for (o, &gv) in buf.iter_mut().zip(&g) {
                                *o = *o + gv * s;
                            }
                        });
                        acc(*b, &mut |buf| {
                            let dot: S = g.iter().zip(ta.data()).map(|(&x, &y)| x * y).sum();
                            buf[0] = buf[0] + dot;
                        });
                    } else {
                        acc(*a, &mut |buf| {
                            for ((o, &gv), &y) in buf.iter_mut().zip(&g).zip(tb.data()) {
                                *o = *o + gv * y;
                            }
                        });
                        acc(*b, &mut |buf| {
                            for ((o, &gv), &x) in buf.iter_mut().zip(&g).zip(ta.data()) {
                                *o = *o + gv * x;
                            }
                        });
                    }
                }
                Op::AddRow(a, row) => {
                    acc(*a, &mut |buf| add_into(buf, &g));
                    let n = val(*row).len();
                    acc(*row, &mut |buf| {
                        for r in g.chunks(n) {
                            add_into(buf, r);
                        }
                    });
                }
                Op::Scale(a, c) => {
                    acc(*a, &mut |buf| {
                        for (o, &gv) in buf.iter_mut().zip(&g) {
                            *o = *o + gv * *c;
                        }
                    });
                }
                Op::MulConst(a, mask) => {
                    acc(*a, &mut |buf| {
                        for ((o, &gv), &m) in buf.iter_mut().zip(&g).zip(mask) {
                            *o = *o + gv * m;
                        }
                    });
                }
                Op::Unary(a, f) => {
                    let (x, y) = (val(*a).data(), node.value.data());
                    acc(*a, &mut |buf| {
                        for j in 0..buf.len() {
                            let d = match f {
                                Unary::Sigmoid => y[j] * (S::one() - y[j]),
                                Unary::Relu => {
                                    if x[j] > S::zero() {
                                        S::one()
                                    } else {
                                        S::zero()
                                    }
                                }
                                Unary::Silu => {
                                    let s = sigmoid(x[j]);
                                    s + x[j] * s * (S::one() - s)
                                }
                                Unary::Softplus => sigmoid(x[j]),
                                Unary::Exp => y[j],
                                Unary::Neg => -S::one(),
                            };
                            buf[j] = buf[j] + g[j] * d;
                        }
                    });
                }
                Op::Glu(a) => {
                    let x = val(*a);
                    let cols = x.cols();
                    let h = cols / 2;
                    acc(*a, &mut |buf| {
                        for (r, (xr, br)) in x.data().chunks(cols).zip(buf.chunks_mut(cols)).enumerate() {
                            for j in 0..h {
                                let s = sigmoid(xr[h + j]);
                                let gv = g[r * h + j];
                                br[j] = br[j] + gv * s;
                                br[h + j] = br[h + j] + gv * xr[j] * s * (S::one() - s);
                            }
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let gn = val(*gain).data();
                    let d = gn.len();
                    let dn = S::of(d as f64);
                    acc(*x, &mut |buf| {
                        for (r, rs) in rstd.iter().enumerate() {
                            let gr = &g[r * d..(r + 1) * d];
                            let xh = &xhat[r * d..(r + 1) * d];
                            let mut mean_dxh = S::zero();
                            let mut mean_dxh_xh = S::zero();
                            for j in 0..d {
                                let dxh = gr[j] * gn[j];
                                mean_dxh = mean_dxh + dxh;
                                mean_dxh_xh = mean_dxh_xh + dxh * xh[j];
                            }
                            mean_dxh = mean_dxh / dn;
                            mean_dxh_xh = mean_dxh_xh / dn;
                            for j in 0..d {
                                let dxh = gr[j] * gn[j];
                                let o = &mut buf[r * d + j];
                                *o = *o + *rs * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                            }
                        }
                    });
                    acc(*gain, &mut |buf| {
                        for (gr, xh) in g.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                buf[j] = buf[j] + gr[j] * xh[j];
                            }
                        }
                    });
                    acc(*bias, &mut |buf| {
                        for gr in g.chunks(d) {
                            add_into(buf, gr);
                        }
                    });
                }
                Op::Softmax(x) => {
                    let y = node.value.data();
                    let dot: S = y.iter().zip(&g).map(|(&a, &b)| a * b).sum();
                    acc(*x, &mut |buf| {
                        for j in 0..buf.len() {
                            buf[j] = buf[j] + y[j] * (g[j] - dot);
                        }
                    });
                }
                Op::MaskFill(x, keep) => {
                    acc(*x, &mut |buf| {
                        for j in 0..buf.len() {
                            if keep[j] {
                                buf[j] = buf[j] + g[j];
                            }
                        }
                    });
                }
                Op::DepthwiseConv {
                    x,
                    kernel,
                    pad_left,
                } => {
                    let (tx, tk) = (val(*x), val(*kernel));
                    let (t, d) = tx.as_matrix_dims();
                    let k = tk.rows();
                    let p = *pad_left;
                    acc(*x, &mut |buf| {
                        for ti in 0..t {
                            for j in 0..k {
                                let src = ti + j;
                                if src < p || src - p >= t {
                                    continue;
                                }
                                let s = src - p;
                                for c in 0..d {
                                    buf[s * d + c] = buf[s * d + c] + tk.data()[j * d + c] * g[ti * d + c];
                                }
                            }
                        }
                    });
                    acc(*kernel, &mut |buf| {
                        for ti in 0..t {
                            for j in 0..k {
                                let src = ti + j;
                                if src < p || src - p >= t {
                                    continue;
                                }
                                let s = src - p;
                                for c in 0..d {
                                    buf[j * d + c] = buf[j * d + c] + tx.data()[s * d + c] * g[ti * d + c];
                                }
                            }
                        }
                    });
                }
                Op::ReverseRows(x) => {
                    let c = node.value.cols();
                    let rows = node.value.rows();
                    acc(*x, &mut |buf| {
                        for r in 0..rows {
                            let src = &g[(rows - 1 - r) * c..(rows - r) * c];
                            add_into(&mut buf[r * c..(r + 1) * c], src);
                        }
                    });
                }
                Op::Reshape(x) => acc(*x, &mut |buf| add_into(buf, &g)),
                Op::SliceCols { x, start } => {
                    let c = val(*x).cols();
                    let len = node.value.cols();
                    acc(*x, &mut |buf| {
                        for (br, gr) in buf.chunks_mut(c).zip(g.chunks(len)) {
                            add_into(&mut br[*start..*start + len], gr);
                        }
                    });
                }
                Op::SliceRows { x, start } => {
                    let c = val(*x).cols();
                    acc(*x, &mut |buf| add_into(&mut buf[start * c..start * c + g.len()], &g));
                }
                Op::ConcatCols(xs) => {
                    let total = node.value.cols();
                    let mut offset = 0;
                    for &v in xs {
                        let w = val(v).cols();
                        acc(v, &mut |buf| {
                            for (br, gr) in buf.chunks_mut(w).zip(g.chunks(total)) {
                                add_into(br, &gr[offset..offset + w]);
                            }
                        });
                        offset += w;
                    }
                }
                Op::WeightedSum { w, xs } => {
                    let wv = val(*w).data();
                    acc(*w, &mut |buf| {
                        for (l, &x) in xs.iter().enumerate() {
                            let dot: S = val(x).data().iter().zip(&g).map(|(&a, &b)| a * b).sum();
                            buf[l] = buf[l] + dot;
                        }
                    });
                    for (l, &x) in xs.iter().enumerate() {
                        let wl = wv[l];
                        acc(x, &mut |buf| {
                            for (o, &gv) in buf.iter_mut().zip(&g) {
                                *o = *o + wl * gv;
                            }
                        });
                    }
                }
                Op::Sum(x) => {
                    let g0 = g[0];
                    acc(*x, &mut |buf| buf.iter_mut().for_each(|o| *o = *o + g0));
                }
                Op::Mean(x) => {
                    let g0 = g[0] / S::of(val(*x).len() as f64);
                    acc(*x, &mut |buf| buf.iter_mut().for_each(|o| *o = *o + g0));
                }
                Op::Custom { inputs, op } => {
                    let ins: Vec<&Tensor<S>> = inputs.iter().map(|&v| val(v)).collect();
                    let gs = op.backward(&ins, &node.value, &g);
                    debug_assert_eq!(gs.len(), inputs.len(), "custom op {}", op.name());
                    for (&v, gi) in inputs.iter().zip(gs) {
                        acc(v, &mut |buf| add_into(buf, &gi));
                    }
                }
            }
        }
        Ok(Gradients { by_leaf })
    }
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Max-subtracted softmax that maps `-inf` entries to exactly zero.
pub fn softmax_values<S: Scalar>(x: &[S]) -> Result<Vec<S>> {
    let max = x
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(S::neg_infinity(), S::max);
    if !max.is_finite() {
        return Err(Error::Degenerate(
            "softmax needs at least one finite entry".into(),
        ));
    }
    let exps: Vec<S> = x
        .iter()
        .map(|&v| {
            if v == S::neg_infinity() {
                S::zero()
            } else {
                (v - max).exp()
            }
        })
        .collect();
    let z: S = exps.iter().copied().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}
