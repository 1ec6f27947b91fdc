//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Every operation appends a node holding its output value and the ids of
//! its inputs, so node order is a topological order. [`Tape::backward`]
//! walks the nodes in reverse, adding each node's contribution into its
//! inputs' gradient accumulators. Parameters enter the tape through
//! [`Tape::param`]; a parameter used several times maps to one node, so its
//! gradient is the sum over all uses.

mod conv;
mod loss;
mod norm;
mod upsample;

use std::collections::HashMap;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub(crate) use upsample::resize as resize_bilinear_kernel;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Upsample { x: Var },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, stats: norm::Stats },
    Affine { x: Var, scale: f64 },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Concat(Vec<Var>),
    Slice { x: Var, lo: usize },
    Sum(Var),
    SoftmaxCe { logits: Var, labels: LabelMask, ignore: Option<u8> },
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
    grad: Option<Vec<T>>,
}

#[derive(Debug)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Input that is not differentiated.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input whose gradient is tracked.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.nodes[v.0].param = Some(id);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated by the last [`Tape::backward`], if `v` received one.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Sign pattern of every ReLU input on the tape, in recording order.
    /// Two evaluations with equal patterns lie on the same linear piece of
    /// every ReLU.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Relu(_)))
            .flat_map(|n| n.value.data().iter().map(|&v| v > T::zero()))
            .collect()
    }

    /// True if every stored value and gradient is finite.
    pub fn all_finite(&self) -> bool {
        self.nodes.iter().all(|n| {
            n.value.is_finite()
                && n.grad
                    .as_ref()
                    .is_none_or(|g| g.iter().all(|v| v.is_finite()))
        })
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = conv::forward(self.value(x), self.value(w), self.value(b), stride, pad)?;
        let rg = self.needs(&[x, w, b]);
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }, rg))
    }

    /// Channel-wise 1×1 convolution.
    pub fn conv1x1(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let ws = self.value(w).shape();
        if ws.h != 1 || ws.w != 1 {
            return Err(Error::shape(format!("conv1x1 weight must be Cout×Cin×1×1, got {ws}")));
        }
        self.conv2d(x, w, b, 1, 0)
    }

    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor < 2 {
            return Err(Error::param(format!("upsample factor must be at least 2, got {factor}")));
        }
        let s = self.value(x).shape();
        let out = upsample::resize(self.value(x), s.h * factor, s.w * factor);
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Upsample { x }, rg))
    }

    /// Standardizes each of `groups` channel groups per sample over its
    /// channels and pixels, then applies per-channel `gamma` and `beta`
    /// (each holding `c` values).
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let s = self.value(x).shape();
        if groups == 0 || s.c % groups != 0 {
            return Err(Error::param(format!("{groups} groups do not divide {} channels", s.c)));
        }
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).len() != s.c {
                return Err(Error::shape(format!(
                    "group norm {name} has {} values for {} channels",
                    self.value(v).len(),
                    s.c
                )));
            }
        }
        let (out, stats) = norm::forward(self.value(x), groups, self.value(gamma).data(), self.value(beta).data());
        let rg = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            rg,
        ))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (a, b) = (T::from_f64_lossy(scale), T::from_f64_lossy(shift));
        let out = self.value(x).map(|v| a * v + b);
        let rg = self.needs(&[x]);
        self.push(out, Op::Affine { x, scale }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.needs(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        let rg = self.needs(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::tanh);
        let rg = self.needs(&[x]);
        self.push(out, Op::Tanh(x), rg)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(format!(
                "elementwise op on {} and {}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, |x, y| x + y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, |x, y| x * y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_channels(&values)?;
        let rg = self.needs(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    pub fn slice_channels(&mut self, x: Var, range: Range<usize>) -> Result<Var> {
        let lo = range.start;
        let out = self.value(x).slice_channels(range)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Slice { x, lo }, rg))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum();
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    /// Mean categorical cross-entropy over non-ignored pixels.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &LabelMask,
        ignore: Option<u8>,
    ) -> Result<Var> {
        let s = self.value(logits).shape();
        if (labels.n, labels.h, labels.w) != (s.n, s.h, s.w) {
            return Err(Error::shape(format!(
                "labels {}x{}x{} do not match logits {s}",
                labels.n, labels.h, labels.w
            )));
        }
        labels.check_labels(s.c, ignore)?;
        let loss = loss::forward(self.value(logits), labels, ignore);
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                labels: labels.clone(),
                ignore,
            },
            rg,
        ))
    }

    /// Populates gradients of every node that `loss` depends on.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar, got {}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.grad = g;
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let mut send = |v: Var, contrib: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &b)| *a += b),
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d { x, w, b, stride, pad } => {
                let need_dx = self.nodes[x.0].requires_grad;
                let cg = conv::backward(val(x), val(w), stride, pad, g, need_dx);
                if let Some(dx) = cg.dx {
                    send(x, dx);
                }
                send(w, cg.dw);
                send(b, cg.db);
            }
            &Op::Upsample { x } => {
                let s = node.value.shape();
                send(x, upsample::resize_backward(val(x).shape(), s.h, s.w, g));
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let ng = norm::backward(val(*x), *groups, val(*gamma).data(), stats, g);
                send(*x, ng.dx);
                send(*gamma, ng.dgamma);
                send(*beta, ng.dbeta);
            }
            &Op::Affine { x, scale } => {
                let a = T::from_f64_lossy(scale);
                send(x, g.iter().map(|&g| a * g).collect());
            }
            &Op::Relu(x) => {
                let y = node.value.data();
                send(x, y.iter().zip(g).map(|(&y, &g)| if y > T::zero() { g } else { T::zero() }).collect());
            }
            &Op::Sigmoid(x) => {
                let y = node.value.data();
                send(x, y.iter().zip(g).map(|(&y, &g)| g * y * (T::one() - y)).collect());
            }
            &Op::Tanh(x) => {
                let y = node.value.data();
                send(x, y.iter().zip(g).map(|(&y, &g)| g * (T::one() - y * y)).collect());
            }
            &Op::Add(a, b) => {
                send(a, g.to_vec());
                send(b, g.to_vec());
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (val(a).data(), val(b).data());
                send(a, g.iter().zip(vb).map(|(&g, &y)| g * y).collect());
                send(b, g.iter().zip(va).map(|(&g, &x)| g * x).collect());
            }
            Op::Concat(parts) => {
                let s = node.value.shape();
                let plane = s.plane();
                let mut offset = 0;
                for &p in parts {
                    let pc = val(p).shape().c;
                    let mut d = Vec::with_capacity(s.n * pc * plane);
                    for n in 0..s.n {
                        let start = n * s.image_len() + offset * plane;
                        d.extend_from_slice(&g[start..start + pc * plane]);
                    }
                    send(p, d);
                    offset += pc;
                }
            }
            &Op::Slice { x, lo } => {
                let xs = val(x).shape();
                let s = node.value.shape();
                let plane = s.plane();
                let mut d = vec![T::zero(); xs.numel()];
                for n in 0..s.n {
                    let dst = n * xs.image_len() + lo * plane;
                    let src = n * s.image_len();
                    d[dst..dst + s.image_len()].copy_from_slice(&g[src..src + s.image_len()]);
                }
                send(x, d);
            }
            &Op::Sum(x) => send(x, vec![g[0]; val(x).len()]),
            Op::SoftmaxCe { logits, labels, ignore } => {
                send(*logits, loss::backward(val(*logits), labels, *ignore, g[0]));
            }
        }
    }

    /// Adds the gradient of every parameter node into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) {
        for node in &self.nodes {
            if let (Some(id), Some(g)) = (node.param, node.grad.as_ref()) {
                store.add_grad(id, g);
            }
        }
    }
}
