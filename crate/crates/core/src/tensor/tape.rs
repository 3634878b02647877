//! Reverse-mode tape.
//!
//! Every op appends a node holding its value and whatever it needs for the
//! backward pass. A node requires a gradient when any parent does; values
//! that no backward rule reads can be dropped early with [`Tape::release`].

use rand::rngs::SmallRng;
use rand::{Rng, RngCore, SeedableRng};

use super::conv::{conv2d_backward, conv2d_forward, Conv2dSpec};
use super::linear::{linear_backward, linear_forward};
use super::lstm::{blstm_backward, blstm_forward, LstmCache, LstmWeights};
use super::norm::{
    batchnorm_eval_backward, batchnorm_eval_forward, batchnorm_train_backward, batchnorm_train_forward, BatchNormStats,
    BnCache,
};
use super::pool::{maxpool2d_backward, maxpool2d_forward, PoolSpec};
use super::Tensor;
use crate::error::{AadError, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, spec: Conv2dSpec },
    MaxPool { x: Var, argmax: Vec<u32> },
    BatchNormTrain { x: Var, gamma: Var, beta: Var, cache: BnCache<T> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, stats: BatchNormStats<T> },
    Dropout { x: Var, keep: Vec<bool>, scale: T },
    Relu { x: Var },
    Linear { x: Var, w: Var, b: Var },
    Blstm { x: Var, params: [Var; 6], cache: LstmCache<T> },
    Reshape { x: Var },
    Permute { x: Var, axes: Vec<usize> },
    Concat { parts: Vec<Var> },
    SoftmaxXent { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Dot { x: Var, weights: Tensor<T> },
}

struct Node<T> {
    value: Option<Tensor<T>>,
    shape: Vec<usize>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    keep_value: bool,
    op: Op<T>,
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape: value.shape().to_vec(),
            value: Some(value),
            grad: None,
            requires_grad,
            keep_value: true,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.nodes[v.0].value.as_ref().expect("tape value was released")
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    /// Drops the value of an intermediate node unless a backward rule needs it.
    pub fn release(&mut self, v: Var) {
        let node = &mut self.nodes[v.0];
        if !node.keep_value && !matches!(node.op, Op::Leaf) {
            node.value = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var], needs_values: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        if requires_grad {
            for p in needs_values {
                self.nodes[p.0].keep_value = true;
            }
        }
        let shape = value.shape().to_vec();
        self.nodes.push(Node { value: Some(value), shape, grad: None, requires_grad, keep_value: false, op });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: &Conv2dSpec) -> Result<Var> {
        let y = conv2d_forward(self.value(x), self.value(w), self.value(b), spec)?;
        Ok(self.push(y, Op::Conv2d { x, w, b, spec: *spec }, &[x, w, b], &[x, w]))
    }

    /// A pool that keeps every element returns `x` itself.
    pub fn maxpool2d(&mut self, x: Var, spec: &PoolSpec) -> Result<Var> {
        let s = self.shape(x);
        if s.len() == 4 && spec.is_identity(s[2], s[3]) {
            return Ok(x);
        }
        let (y, argmax) = maxpool2d_forward(self.value(x), spec)?;
        Ok(self.push(y, Op::MaxPool { x, argmax }, &[x], &[]))
    }

    /// Training mode normalizes with batch statistics and updates `stats`;
    /// evaluation mode reads `stats`.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats<T>,
        mode: Mode,
    ) -> Result<Var> {
        match mode {
            Mode::Train => {
                let (y, cache) = batchnorm_train_forward(self.value(x), self.value(gamma), self.value(beta))?;
                stats.update(&cache);
                Ok(self.push(y, Op::BatchNormTrain { x, gamma, beta, cache }, &[x, gamma, beta], &[x, gamma]))
            }
            Mode::Eval => {
                let y = batchnorm_eval_forward(self.value(x), self.value(gamma), self.value(beta), stats)?;
                let op = Op::BatchNormEval { x, gamma, beta, stats: stats.clone() };
                Ok(self.push(y, op, &[x, gamma, beta], &[x, gamma]))
            }
        }
    }

    /// Inverted dropout. Identity in evaluation mode or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(AadError::invalid(format!("dropout probability must lie in [0, 1), got {p}")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let scale = T::lit(1.0 / (1.0 - p));
        let xv = self.value(x);
        // masks come from a fast generator seeded by the caller's rng; an
        // element is dropped when its 32-bit draw falls below p * 2^32
        let threshold = (p * 4294967296.0) as u64;
        let mut fast = SmallRng::seed_from_u64(rng.next_u64());
        let n = xv.numel();
        let mut keep = vec![false; n];
        let mut draws = [0u64; 256];
        for block in keep.chunks_mut(512) {
            draws.iter_mut().for_each(|d| *d = fast.next_u64());
            for (pair, &r) in block.chunks_mut(2).zip(&draws) {
                pair[0] = (r & 0xffff_ffff) >= threshold;
                if let Some(k) = pair.get_mut(1) {
                    *k = (r >> 32) >= threshold;
                }
            }
        }
        // table lookup instead of a branch: the keep pattern is random
        let lut = [T::zero(), scale];
        let data: Vec<T> = xv.data().iter().zip(&keep).map(|(&v, &k)| v * lut[usize::from(k)]).collect();
        let y = Tensor::from_vec(xv.shape(), data)?;
        Ok(self.push(y, Op::Dropout { x, keep, scale }, &[x], &[]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let out = self.push(y, Op::Relu { x }, &[x], &[]);
        // the backward rule reads the output sign
        if self.nodes[out.0].requires_grad {
            self.nodes[out.0].keep_value = true;
        }
        out
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = linear_forward(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Linear { x, w, b }, &[x, w, b], &[x, w]))
    }

    /// `params`: forward `w_ih, w_hh, bias`, then backward `w_ih, w_hh, bias`.
    pub fn blstm(&mut self, x: Var, params: [Var; 6]) -> Result<Var> {
        let fwd = LstmWeights { w_ih: self.value(params[0]), w_hh: self.value(params[1]), bias: self.value(params[2]) };
        let bwd = LstmWeights { w_ih: self.value(params[3]), w_hh: self.value(params[4]), bias: self.value(params[5]) };
        let (y, cache) = blstm_forward(self.value(x), fwd, bwd)?;
        let mut parents = vec![x];
        parents.extend_from_slice(&params);
        Ok(self.push(y, Op::Blstm { x, params, cache }, &parents, &parents))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        Ok(self.push(y, Op::Reshape { x }, &[x], &[]))
    }

    /// General axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let y = permute(self.value(x), axes)?;
        Ok(self.push(y, Op::Permute { x, axes: axes.to_vec() }, &[x], &[]))
    }

    /// Concatenation along the last axis; leading extents must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(AadError::ShapeMismatch { expected: first.clone(), actual: s.to_vec() });
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let y = Tensor::from_vec(&shape, data)?;
        Ok(self.push(y, Op::Concat { parts: parts.to_vec() }, parts, &[]))
    }

    /// Mean cross-entropy of a row-wise softmax. Returns the scalar loss and
    /// the probabilities `[N, C]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<(Var, Tensor<T>)> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.rows() != labels.len() {
            return Err(AadError::invalid(format!(
                "logits {:?} do not match {} labels",
                lv.shape(),
                labels.len()
            )));
        }
        let classes = lv.cols();
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(AadError::invalid(format!("label {bad} out of range for {classes} classes")));
        }
        let probs = softmax_rows(lv);
        let n = T::from_usize(labels.len()).unwrap();
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -(probs.data()[i * classes + l].max(T::min_positive_value())).ln())
            .sum::<T>()
            / n;
        let op = Op::SoftmaxXent { logits, labels: labels.to_vec(), probs: probs.data().to_vec() };
        Ok((self.push(Tensor::scalar(loss), op, &[logits], &[]), probs))
    }

    /// `sum(x * weights)` as a scalar; handy as a probe loss.
    pub fn dot(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != weights.shape() {
            return Err(AadError::ShapeMismatch { expected: xv.shape().to_vec(), actual: weights.shape().to_vec() });
        }
        let s = xv.data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot { x, weights }, &[x], &[]))
    }

    /// Accumulates d(output)/d(node) into every node that requires a gradient.
    /// Intermediate values and gradients are freed as the sweep passes them.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.nodes[output.0].shape.iter().product::<usize>() != 1 {
            return Err(AadError::invalid("backward needs a scalar output"));
        }
        if !self.nodes[output.0].requires_grad {
            return Ok(());
        }
        let shape = self.nodes[output.0].shape.clone();
        self.nodes[output.0].grad = Some(Tensor::full(&shape, T::one()));
        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            let contributions = match op {
                Op::Relu { x } => {
                    let y = self.nodes[i].value.as_ref().expect("relu output kept for backward");
                    vec![(x, Self::backward_relu(y, g))]
                }
                ref other => self.backward_op(other, g)?,
            };
            self.nodes[i].value = None;
            for (parent, grad) in contributions {
                let node = &mut self.nodes[parent.0];
                if !node.requires_grad {
                    continue;
                }
                match node.grad.as_mut() {
                    Some(acc) => acc.add_assign(&grad),
                    None => node.grad = Some(grad),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_op(&self, op: &Op<T>, mut g: Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let mut out = Vec::new();
        match op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, spec } => {
                let grads = conv2d_backward(self.value(*x), self.value(*w), &g, spec, self.wants(*x))?;
                if let Some(dx) = grads.dx {
                    out.push((*x, dx));
                }
                out.push((*w, grads.dw));
                out.push((*b, grads.db));
            }
            Op::MaxPool { x, argmax } => {
                out.push((*x, maxpool2d_backward(&g, argmax, self.shape(*x))));
            }
            Op::BatchNormTrain { x, gamma, beta, cache } => {
                let grads = batchnorm_train_backward(self.value(*x), self.value(*gamma), cache, &g)?;
                out.push((*x, grads.dx));
                out.push((*gamma, grads.dgamma));
                out.push((*beta, grads.dbeta));
            }
            Op::BatchNormEval { x, gamma, beta, stats } => {
                let grads = batchnorm_eval_backward(self.value(*x), self.value(*gamma), stats, &g)?;
                out.push((*x, grads.dx));
                out.push((*gamma, grads.dgamma));
                out.push((*beta, grads.dbeta));
            }
            Op::Dropout { x, keep, scale } => {
                let lut = [T::zero(), *scale];
                g.data_mut().iter_mut().zip(keep).for_each(|(v, &k)| *v *= lut[usize::from(k)]);
                out.push((*x, g));
            }
            Op::Relu { .. } => unreachable!("handled in backward_relu"),
            Op::Linear { x, w, b } => {
                let grads = linear_backward(self.value(*x), self.value(*w), &g)?;
                out.push((*x, grads.dx));
                out.push((*w, grads.dw));
                out.push((*b, grads.db));
            }
            Op::Blstm { x, params, cache } => {
                let v = |i: usize| self.value(params[i]);
                let fwd = LstmWeights { w_ih: v(0), w_hh: v(1), bias: v(2) };
                let bwd = LstmWeights { w_ih: v(3), w_hh: v(4), bias: v(5) };
                let grads = blstm_backward(self.value(*x), fwd, bwd, cache, &g)?;
                out.push((*x, grads.dx));
                out.push((params[0], grads.fwd.w_ih));
                out.push((params[1], grads.fwd.w_hh));
                out.push((params[2], grads.fwd.bias));
                out.push((params[3], grads.bwd.w_ih));
                out.push((params[4], grads.bwd.w_hh));
                out.push((params[5], grads.bwd.bias));
            }
            Op::Reshape { x } => {
                out.push((*x, g.reshape(self.shape(*x))?));
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                out.push((*x, permute(&g, &inverse)?));
            }
            Op::Concat { parts } => {
                let total = *g.shape().last().unwrap();
                let rows = g.numel() / total;
                let mut offset = 0;
                for &p in parts {
                    let w = *self.shape(p).last().unwrap();
                    let mut data = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        data.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                    }
                    out.push((p, Tensor::from_vec(self.shape(p), data)?));
                    offset += w;
                }
            }
            Op::SoftmaxXent { logits, labels, probs } => {
                let classes = probs.len() / labels.len();
                let scale = g.data()[0] / T::from_usize(labels.len()).unwrap();
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * classes + l] -= T::one();
                }
                d.iter_mut().for_each(|v| *v *= scale);
                out.push((*logits, Tensor::from_vec(self.shape(*logits), d)?));
            }
            Op::Dot { x, weights } => {
                let s = g.data()[0];
                out.push((*x, weights.map(|w| w * s)));
            }
        }
        Ok(out)
    }
}

impl<T: Scalar> Tape<T> {
    /// ReLU needs its own output, which lives on the node being processed, so
    /// it is routed here before the generic rule table.
    fn backward_relu(y: &Tensor<T>, mut g: Tensor<T>) -> Tensor<T> {
        for (gv, &v) in g.data_mut().iter_mut().zip(y.data()) {
            *gv = if v > T::zero() { *gv } else { T::zero() };
        }
        g
    }
}

pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let classes = logits.cols();
    let mut p = logits.data().to_vec();
    for row in p.chunks_mut(classes) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    Tensor::from_vec(logits.shape(), p).expect("same shape")
}

fn permute<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return Err(AadError::invalid(format!("{axes:?} is not a permutation of {rank} axes")));
    }
    let in_shape = x.shape();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let mut in_strides = vec![1; rank];
    for i in (0..rank - 1).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut data = Vec::with_capacity(x.numel());
    let mut idx = vec![0usize; rank];
    for _ in 0..x.numel() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        data.push(x.data()[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::from_vec(&out_shape, data)
}
