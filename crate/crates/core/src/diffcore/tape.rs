//! Reverse-mode differentiation over a linear tape of dense f64 tensors.
//!
//! Every operation appends a node holding its forward value and a record of
//! the operands that produced it. Nodes are only ever appended, so node
//! indices give a topological order and the graph cannot contain cycles.

use std::f64::consts::PI;

use super::params::ParamStore;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Gelu(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Softmax(Var),
    LayerNorm {
        x: Var,
        scale: Var,
        shift: Var,
        eps: f64,
    },
    Reshape(Var),
    Transpose(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum {
        x: Var,
        axis: usize,
    },
    Mean {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
    MeanAll(Var),
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Option<Vec<f64>>,
    op: Op,
    param: Option<String>,
}

impl Node {
    fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }
}

/// A differentiation graph. Build one per forward pass.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

const GELU_C: f64 = 0.044_715;

fn gelu_coeff() -> f64 {
    (2.0 / PI).sqrt()
}

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    let u = gelu_coeff() * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let c = gelu_coeff();
    let u = c * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_C * x * x)
}

/// Split a shape around `axis` into (outer, axis length, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Accumulated gradient, present iff the node requires grad.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad()
    }

    /// First element of a node's value; convenient for scalar losses.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let grad = requires_grad.then(|| vec![0.0; value.len()]);
        self.nodes.push(Node {
            shape,
            value,
            grad,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, values: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Var> {
        if numel(shape) != values.len() {
            return Err(Error::invalid(
                "leaf",
                format!("{} values do not fill shape {:?}", values.len(), shape),
            ));
        }
        Ok(self.push(shape.to_vec(), values, Op::Leaf, requires_grad))
    }

    /// A leaf that takes no gradient.
    pub fn constant(&mut self, values: Vec<f64>, shape: &[usize]) -> Result<Var> {
        self.leaf(values, shape, false)
    }

    /// A leaf that accumulates gradient.
    pub fn variable(&mut self, values: Vec<f64>, shape: &[usize]) -> Result<Var> {
        self.leaf(values, shape, true)
    }

    /// Register a parameter from `store` as a leaf. Frozen parameters enter the
    /// graph without gradient tracking.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let p = store
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        let v = self.leaf(p.values.clone(), &p.shape, !store.is_frozen(name))?;
        self.nodes[v.0].param = Some(name.to_string());
        Ok(v)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad())
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let n = &self.nodes[x.0];
        let value = n.value.iter().map(|&a| f(a)).collect();
        let shape = n.shape.clone();
        let rg = n.requires_grad();
        self.push(shape, value, op, rg)
    }

    /// Output shape for a broadcasting binary op: the shorter operand must be a
    /// trailing suffix of the longer one.
    fn broadcast_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        let (long, short) = if sa.len() >= sb.len() {
            (sa, sb)
        } else {
            (sb, sa)
        };
        if long[long.len() - short.len()..] != short[..] {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(long.clone())
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let shape = self.broadcast_shape(op_name, a, b)?;
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let (la, lb) = (va.len(), vb.len());
        let value = (0..numel(&shape))
            .map(|i| f(va[i % la], vb[i % lb]))
            .collect();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(shape, value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |a| a * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |a| a + c)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), f64::ln)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), gelu)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |a| a * a)
    }

    /// Elementwise clamp; the gradient is zero where the bound is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp(x, lo, hi), |a| a.clamp(lo, hi))
    }

    /// Matrix product over the last two dims. `b` is either a plain matrix
    /// shared across `a`'s leading dims, or carries the same leading dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (n, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, m) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let lead = &sa[..sa.len() - 2];
        let shared = sb.len() == 2;
        if k != kb || (!shared && sb[..sb.len() - 2] != *lead) {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let batch = numel(lead);
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let mut out = vec![0.0; batch * n * m];
        for bi in 0..batch {
            let ao = bi * n * k;
            let bo = if shared { 0 } else { bi * k * m };
            let oo = bi * n * m;
            for i in 0..n {
                let row = &mut out[oo + i * m..oo + (i + 1) * m];
                for p in 0..k {
                    let av = va[ao + i * k + p];
                    let brow = &vb[bo + p * m..bo + (p + 1) * m];
                    for (o, &bv) in row.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([n, m]);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(shape, out, Op::MatMul(a, b), rg))
    }

    /// Softmax over the last dim.
    pub fn softmax(&mut self, x: Var) -> Var {
        let n = &self.nodes[x.0];
        let d = *n.shape.last().unwrap_or(&1);
        let mut value = n.value.clone();
        for row in value.chunks_mut(d.max(1)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let shape = n.shape.clone();
        let rg = n.requires_grad();
        self.push(shape, value, Op::Softmax(x), rg)
    }

    /// Layer normalization over the last dim with learnable scale and shift
    /// (both of shape `[d]`). Variance is the population variance.
    pub fn layer_norm(&mut self, x: Var, scale: Var, shift: Var, eps: f64) -> Result<Var> {
        let sx = self.nodes[x.0].shape.clone();
        let d = *sx
            .last()
            .ok_or_else(|| Error::shape("layer_norm", &sx, &[]))?;
        for p in [scale, shift] {
            if self.nodes[p.0].shape != [d] {
                return Err(Error::shape("layer_norm", &sx, &self.nodes[p.0].shape));
            }
        }
        let vs = &self.nodes[scale.0].value;
        let vh = &self.nodes[shift.0].value;
        let mut value = Vec::with_capacity(numel(&sx));
        for row in self.nodes[x.0].value.chunks(d) {
            let (mean, inv_std) = row_stats(row, eps);
            for j in 0..d {
                value.push((row[j] - mean) * inv_std * vs[j] + vh[j]);
            }
        }
        let rg = self.any_grad(&[x, scale, shift]);
        Ok(self.push(
            sx,
            value,
            Op::LayerNorm {
                x,
                scale,
                shift,
                eps,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n = &self.nodes[x.0];
        if numel(shape) != n.value.len() {
            return Err(Error::shape("reshape", &n.shape, shape));
        }
        let value = n.value.clone();
        let rg = n.requires_grad();
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), rg))
    }

    /// Swap the last two dims.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let n = &self.nodes[x.0];
        let s = &n.shape;
        if s.len() < 2 {
            return Err(Error::shape("transpose", s, &[]));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = numel(&s[..s.len() - 2]);
        let mut value = vec![0.0; n.value.len()];
        for b in 0..batch {
            let o = b * r * c;
            for i in 0..r {
                for j in 0..c {
                    value[o + j * r + i] = n.value[o + i * c + j];
                }
            }
        }
        let mut shape = s.clone();
        let len = shape.len();
        shape.swap(len - 2, len - 1);
        let rg = n.requires_grad();
        Ok(self.push(shape, value, Op::Transpose(x), rg))
    }

    /// Concatenate along `axis`; all other dims must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no operands"))?;
        let base = self.nodes[first.0].shape.clone();
        if axis >= base.len() {
            return Err(Error::invalid(
                "concat",
                format!("axis {axis} out of range for shape {base:?}"),
            ));
        }
        let mut total = 0;
        for p in parts {
            let s = &self.nodes[p.0].shape;
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut value = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let n = &self.nodes[p.0];
                let block = n.shape[axis] * inner;
                value.extend_from_slice(&n.value[o * block..(o + 1) * block]);
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            shape,
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let n = &self.nodes[x.0];
        if axis >= n.shape.len() || start >= end || end > n.shape[axis] {
            return Err(Error::invalid(
                "slice",
                format!(
                    "range {start}..{end} on axis {axis} invalid for shape {:?}",
                    n.shape
                ),
            ));
        }
        let (outer, len, inner) = split_axis(&n.shape, axis);
        let w = end - start;
        let mut value = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            let base = o * len * inner;
            value.extend_from_slice(&n.value[base + start * inner..base + end * inner]);
        }
        let mut shape = n.shape.clone();
        shape[axis] = w;
        let rg = n.requires_grad();
        Ok(self.push(shape, value, Op::Slice { x, axis, start }, rg))
    }

    fn reduce(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let n = &self.nodes[x.0];
        let op_name = if mean { "mean" } else { "sum" };
        if axis >= n.shape.len() {
            return Err(Error::invalid(
                op_name,
                format!("axis {axis} out of range for shape {:?}", n.shape),
            ));
        }
        let (outer, len, inner) = split_axis(&n.shape, axis);
        let mut value = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &n.value[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, s) in value[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        if mean {
            let inv = 1.0 / len as f64;
            value.iter_mut().for_each(|v| *v *= inv);
        }
        let mut shape = n.shape.clone();
        shape.remove(axis);
        let rg = n.requires_grad();
        let op = if mean {
            Op::Mean { x, axis }
        } else {
            Op::Sum { x, axis }
        };
        Ok(self.push(shape, value, op, rg))
    }

    /// Sum over `axis`, removing it.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, false)
    }

    /// Mean over `axis`, removing it.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, true)
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let n = &self.nodes[x.0];
        let s = n.value.iter().sum();
        let rg = n.requires_grad();
        self.push(vec![], vec![s], Op::SumAll(x), rg)
    }

    /// Mean of all elements, as a scalar node.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = &self.nodes[x.0];
        let s = n.value.iter().sum::<f64>() / n.value.len() as f64;
        let rg = n.requires_grad();
        self.push(vec![], vec![s], Op::MeanAll(x), rg)
    }

    /// Mean squared error between two same-shape nodes.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mse", self.shape(a), self.shape(b)));
        }
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean_all(sq))
    }

    /// Zero every stored gradient on the tape.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = &mut n.grad {
                g.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// Accumulate ∂loss/∂node into every node that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = &self.nodes[loss.0].shape;
        if numel(shape) != 1 {
            return Err(Error::NonScalarLoss(shape.clone()));
        }
        if !self.nodes[loss.0].requires_grad() {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad() {
                continue;
            }
            self.propagate(i, &g, &mut adj);
            if let Some(acc) = &mut self.nodes[i].grad {
                for (a, d) in acc.iter_mut().zip(&g) {
                    *a += d;
                }
            }
        }
        Ok(())
    }

    /// Add every parameter leaf's gradient into the matching entry of `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for n in &self.nodes {
            if let (Some(name), Some(g)) = (&n.param, &n.grad) {
                let p = store
                    .get_mut(name)
                    .ok_or_else(|| Error::MissingParam(name.clone()))?;
                for (a, d) in p.grad.iter_mut().zip(g) {
                    *a += d;
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let wants = |v: &Var| self.nodes[v.0].requires_grad();
        let mut send = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad() {
                return;
            }
            let slot = adj[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                send(*a, &mut |ga| {
                    let l = ga.len();
                    for (k, d) in g.iter().enumerate() {
                        ga[k % l] += d;
                    }
                });
                send(*b, &mut |gb| {
                    let l = gb.len();
                    for (k, d) in g.iter().enumerate() {
                        gb[k % l] += sign * d;
                    }
                });
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                let (la, lb) = (va.len(), vb.len());
                let div = matches!(node.op, Op::Div(..));
                send(*a, &mut |ga| {
                    for (k, d) in g.iter().enumerate() {
                        let y = vb[k % lb];
                        ga[k % la] += if div { d / y } else { d * y };
                    }
                });
                send(*b, &mut |gb| {
                    for (k, d) in g.iter().enumerate() {
                        let x = va[k % la];
                        let y = vb[k % lb];
                        gb[k % lb] += if div { -d * x / (y * y) } else { d * x };
                    }
                });
            }
            Op::Scale(x, c) => send(*x, &mut |gx| {
                for (a, d) in gx.iter_mut().zip(g) {
                    *a += c * d;
                }
            }),
            Op::AddScalar(x) | Op::Reshape(x) => send(*x, &mut |gx| {
                for (a, d) in gx.iter_mut().zip(g) {
                    *a += d;
                }
            }),
            Op::Exp(x) => send(*x, &mut |gx| {
                for ((a, d), y) in gx.iter_mut().zip(g).zip(&node.value) {
                    *a += d * y;
                }
            }),
            Op::Log(x) => {
                let vx = &self.nodes[x.0].value;
                send(*x, &mut |gx| {
                    for ((a, d), xv) in gx.iter_mut().zip(g).zip(vx) {
                        *a += d / xv;
                    }
                })
            }
            Op::Tanh(x) => send(*x, &mut |gx| {
                for ((a, d), y) in gx.iter_mut().zip(g).zip(&node.value) {
                    *a += d * (1.0 - y * y);
                }
            }),
            Op::Gelu(x) => {
                let vx = &self.nodes[x.0].value;
                send(*x, &mut |gx| {
                    for ((a, d), xv) in gx.iter_mut().zip(g).zip(vx) {
                        *a += d * gelu_grad(*xv);
                    }
                })
            }
            Op::Square(x) => {
                let vx = &self.nodes[x.0].value;
                send(*x, &mut |gx| {
                    for ((a, d), xv) in gx.iter_mut().zip(g).zip(vx) {
                        *a += 2.0 * d * xv;
                    }
                })
            }
            Op::Clamp(x, lo, hi) => {
                let vx = &self.nodes[x.0].value;
                send(*x, &mut |gx| {
                    for ((a, d), xv) in gx.iter_mut().zip(g).zip(vx) {
                        if *xv >= *lo && *xv <= *hi {
                            *a += d;
                        }
                    }
                })
            }
            Op::MatMul(a, b) => self.matmul_backward(*a, *b, g, &mut send),
            Op::Softmax(x) => {
                let d = *node.shape.last().unwrap_or(&1);
                send(*x, &mut |gx| {
                    for ((ga, gy), y) in gx.chunks_mut(d).zip(g.chunks(d)).zip(node.value.chunks(d))
                    {
                        let dot: f64 = gy.iter().zip(y).map(|(p, q)| p * q).sum();
                        for j in 0..d {
                            ga[j] += y[j] * (gy[j] - dot);
                        }
                    }
                })
            }
            Op::LayerNorm {
                x,
                scale,
                shift,
                eps,
            } => {
                let d = *node.shape.last().unwrap();
                let vx = &self.nodes[x.0].value;
                let vs = &self.nodes[scale.0].value;
                if wants(x) {
                    send(*x, &mut |gx| {
                        for ((ga, gy), row) in gx.chunks_mut(d).zip(g.chunks(d)).zip(vx.chunks(d)) {
                            let (mean, inv_std) = row_stats(row, *eps);
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for j in 0..d {
                                let xh = (row[j] - mean) * inv_std;
                                let dxh = gy[j] * vs[j];
                                m1 += dxh;
                                m2 += dxh * xh;
                            }
                            m1 /= d as f64;
                            m2 /= d as f64;
                            for j in 0..d {
                                let xh = (row[j] - mean) * inv_std;
                                let dxh = gy[j] * vs[j];
                                ga[j] += inv_std * (dxh - m1 - xh * m2);
                            }
                        }
                    });
                }
                send(*scale, &mut |gs| {
                    for (gy, row) in g.chunks(d).zip(vx.chunks(d)) {
                        let (mean, inv_std) = row_stats(row, *eps);
                        for j in 0..d {
                            gs[j] += gy[j] * (row[j] - mean) * inv_std;
                        }
                    }
                });
                send(*shift, &mut |gh| {
                    for gy in g.chunks(d) {
                        for j in 0..d {
                            gh[j] += gy[j];
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let s = &node.shape;
                // output is [.., c, r]; input was [.., r, c]
                let (c, r) = (s[s.len() - 2], s[s.len() - 1]);
                let batch = numel(&s[..s.len() - 2]);
                send(*x, &mut |gx| {
                    for b in 0..batch {
                        let o = b * r * c;
                        for i in 0..r {
                            for j in 0..c {
                                gx[o + i * c + j] += g[o + j * r + i];
                            }
                        }
                    }
                })
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = split_axis(&node.shape, *axis);
                let row = node.shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let block = self.nodes[p.0].shape[*axis] * inner;
                    send(*p, &mut |gp| {
                        for o in 0..outer {
                            let src = &g[o * row + offset..o * row + offset + block];
                            for (a, d) in gp[o * block..(o + 1) * block].iter_mut().zip(src) {
                                *a += d;
                            }
                        }
                    });
                    offset += block;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, len, inner) = split_axis(&self.nodes[x.0].shape, *axis);
                let w = node.shape[*axis];
                send(*x, &mut |gx| {
                    for o in 0..outer {
                        let base = o * len * inner + start * inner;
                        let src = &g[o * w * inner..(o + 1) * w * inner];
                        for (a, d) in gx[base..base + w * inner].iter_mut().zip(src) {
                            *a += d;
                        }
                    }
                })
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let (outer, len, inner) = split_axis(&self.nodes[x.0].shape, *axis);
                let f = if matches!(node.op, Op::Mean { .. }) {
                    1.0 / len as f64
                } else {
                    1.0
                };
                send(*x, &mut |gx| {
                    for o in 0..outer {
                        for a in 0..len {
                            let dst = &mut gx[(o * len + a) * inner..(o * len + a + 1) * inner];
                            for (t, d) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *t += f * d;
                            }
                        }
                    }
                })
            }
            Op::SumAll(x) | Op::MeanAll(x) => {
                let len = self.nodes[x.0].value.len();
                let f = if matches!(node.op, Op::MeanAll(_)) {
                    g[0] / len as f64
                } else {
                    g[0]
                };
                send(*x, &mut |gx| gx.iter_mut().for_each(|a| *a += f))
            }
        }
    }

    fn matmul_backward(
        &self,
        a: Var,
        b: Var,
        g: &[f64],
        send: &mut dyn FnMut(Var, &mut dyn FnMut(&mut [f64])),
    ) {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        let (n, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let m = sb[sb.len() - 1];
        let batch = numel(&sa[..sa.len() - 2]);
        let shared = sb.len() == 2;
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        send(a, &mut |ga| {
            for bi in 0..batch {
                let bo = if shared { 0 } else { bi * k * m };
                for i in 0..n {
                    let grow = &g[bi * n * m + i * m..bi * n * m + (i + 1) * m];
                    for p in 0..k {
                        let brow = &vb[bo + p * m..bo + (p + 1) * m];
                        let dot: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        ga[bi * n * k + i * k + p] += dot;
                    }
                }
            }
        });
        send(b, &mut |gb| {
            for bi in 0..batch {
                let bo = if shared { 0 } else { bi * k * m };
                for i in 0..n {
                    let grow = &g[bi * n * m + i * m..bi * n * m + (i + 1) * m];
                    for p in 0..k {
                        let av = va[bi * n * k + i * k + p];
                        for (t, d) in gb[bo + p * m..bo + (p + 1) * m].iter_mut().zip(grow) {
                            *t += av * d;
                        }
                    }
                }
            }
        });
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}
