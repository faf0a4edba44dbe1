//! Reverse-mode differentiation over a linear operation tape.
//!
//! Every operation appends a node holding its output value. Nodes are
//! created in evaluation order, so walking the tape backwards from the loss
//! is a valid reverse topological order and visits each node once.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::ops::{self, Reduction};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Debug)]
enum Op {
    /// A leaf: a tracked input/parameter, or a constant.
    Source,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    BiasAdd(usize, usize),
    Relu(usize),
    MaxPool2d {
        x: usize,
        argmax: Vec<u32>,
    },
    Reshape(usize),
    Conv2d {
        x: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        cols: Option<Vec<f32>>,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Tensor,
        reduction: Reduction,
    },
    Sum(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    leaf: bool,
}

/// A single-owner recording of tensor operations.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a tracked leaf; [`backward`](Self::backward) reports its gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Source, true, true)
    }

    /// Records an untracked value.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Source, false, false)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        self.check(v)?;
        Ok(&self.nodes[v.index].value)
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        self.check(v)?;
        Ok(self.nodes[v.index].requires_grad)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, leaf: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            leaf,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Usage(format!(
                "variable #{} does not belong to this tape",
                v.index
            )));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let rg = self.nodes[x.index].requires_grad;
        self.push(value, op, rg, false)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let rg = self.nodes[a.index].requires_grad || self.nodes[b.index].requires_grad;
        self.push(value, op, rg, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = ops::matmul(&self.nodes[a.index].value, &self.nodes[b.index].value)?;
        Ok(self.binary(a, b, out, Op::MatMul(a.index, b.index)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = ops::add(&self.nodes[a.index].value, &self.nodes[b.index].value)?;
        Ok(self.binary(a, b, out, Op::Add(a.index, b.index)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = ops::sub(&self.nodes[a.index].value, &self.nodes[b.index].value)?;
        Ok(self.binary(a, b, out, Op::Sub(a.index, b.index)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = ops::mul(&self.nodes[a.index].value, &self.nodes[b.index].value)?;
        Ok(self.binary(a, b, out, Op::Mul(a.index, b.index)))
    }

    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(bias)?;
        let out = ops::bias_add(&self.nodes[x.index].value, &self.nodes[bias.index].value)?;
        Ok(self.binary(x, bias, out, Op::BiasAdd(x.index, bias.index)))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = ops::relu(&self.nodes[x.index].value);
        Ok(self.unary(x, out, Op::Relu(x.index)))
    }

    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let (out, argmax) = ops::max_pool2d(&self.nodes[x.index].value)?;
        Ok(self.unary(x, out, Op::MaxPool2d { x: x.index, argmax }))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        self.check(x)?;
        let out = self.nodes[x.index].value.clone().reshape(shape)?;
        Ok(self.unary(x, out, Op::Reshape(x.index)))
    }

    /// Collapses every axis after the first.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let shape = self.nodes[x.index].value.shape();
        let n = shape.first().copied().unwrap_or(1);
        let rest: usize = shape.iter().skip(1).product();
        self.reshape(x, [n, rest])
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        self.check(x)?;
        self.check(kernel)?;
        let keep_cols = self.nodes[kernel.index].requires_grad;
        let (out, cols) = ops::conv2d_forward(
            &self.nodes[x.index].value,
            &self.nodes[kernel.index].value,
            stride,
            pad,
            keep_cols,
        )?;
        let op = Op::Conv2d {
            x: x.index,
            kernel: kernel.index,
            stride,
            pad,
            cols,
        };
        Ok(self.binary(x, kernel, out, op))
    }

    /// Softmax cross-entropy against integer labels, as a scalar.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], reduction: Reduction) -> Result<Var> {
        self.check(logits)?;
        let (loss, probs) = ops::softmax_cross_entropy(&self.nodes[logits.index].value, labels, reduction)?;
        let op = Op::CrossEntropy {
            logits: logits.index,
            labels: labels.to_vec(),
            probs,
            reduction,
        };
        Ok(self.unary(logits, Tensor::scalar(loss), op))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let total = self.nodes[x.index].value.sum() as f32;
        Ok(self.unary(x, Tensor::scalar(total), Op::Sum(x.index)))
    }

    /// Gradients of the scalar `loss` with respect to every tracked leaf
    /// recorded before it. The seed gradient is 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)
            .map_err(|_| Error::Usage("loss was not produced on this tape".into()))?;
        if self.nodes[loss.index].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "loss must be a scalar, got shape {:?}",
                self.nodes[loss.index].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.index + 1];
        let mut out: Vec<Option<Tensor>> = vec![None; loss.index + 1];
        if self.nodes[loss.index].requires_grad {
            grads[loss.index] = Some(Tensor::full(self.nodes[loss.index].value.shape(), 1.0));
        }
        for i in (0..=loss.index).rev() {
            let node = &self.nodes[i];
            let Some(g) = grads[i].take() else { continue };
            if node.leaf {
                out[i] = Some(g);
                continue;
            }
            self.propagate(node, g, &mut grads)?;
        }
        for (i, node) in self.nodes.iter().enumerate().take(loss.index + 1) {
            if node.leaf && out[i].is_none() {
                out[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads: out,
        })
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn propagate(&self, node: &Node, g: Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Source => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k, n) = (av.dim(0), av.dim(1), bv.dim(1));
                if self.wants(*a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; m * k];
                    ops::gemm(
                        m,
                        n,
                        k,
                        ops::Mat::rows(g.data(), n),
                        ops::Mat::transposed(bv.data(), n),
                        0.0,
                        &mut da,
                    );
                    accumulate(grads, *a, Tensor::new([m, k], da)?)?;
                }
                if self.wants(*b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * n];
                    ops::gemm(
                        k,
                        m,
                        n,
                        ops::Mat::transposed(av.data(), k),
                        ops::Mat::rows(g.data(), n),
                        0.0,
                        &mut db,
                    );
                    accumulate(grads, *b, Tensor::new([k, n], db)?)?;
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone())?;
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g)?;
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone())?;
                }
                if self.wants(*b) {
                    let neg = g.data().iter().map(|v| -v).collect();
                    accumulate(grads, *b, Tensor::new(g.shape(), neg)?)?;
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, ops::mul(&g, &self.nodes[*b].value)?)?;
                }
                if self.wants(*b) {
                    accumulate(grads, *b, ops::mul(&g, &self.nodes[*a].value)?)?;
                }
            }
            Op::BiasAdd(x, b) => {
                if self.wants(*b) {
                    let channels = g.dim(1);
                    let inner: usize = g.shape()[2..].iter().product();
                    let mut db = vec![0.0f32; channels];
                    if inner > 0 {
                        for (chunk_idx, chunk) in g.data().chunks(inner).enumerate() {
                            db[chunk_idx % channels] += chunk.iter().sum::<f32>();
                        }
                    }
                    accumulate(grads, *b, Tensor::new([channels], db)?)?;
                }
                if self.wants(*x) {
                    accumulate(grads, *x, g)?;
                }
            }
            Op::Relu(x) => {
                let mut g = g;
                for (gv, &y) in g.data_mut().iter_mut().zip(node.value.data()) {
                    if y <= 0.0 {
                        *gv = 0.0;
                    }
                }
                accumulate(grads, *x, g)?;
            }
            Op::MaxPool2d { x, argmax } => {
                let mut dx = Tensor::zeros(self.nodes[*x].value.shape());
                let buf = dx.data_mut();
                for (&idx, &gv) in argmax.iter().zip(g.data()) {
                    buf[idx as usize] += gv;
                }
                accumulate(grads, *x, dx)?;
            }
            Op::Reshape(x) => {
                let shape = self.nodes[*x].value.shape().to_vec();
                accumulate(grads, *x, g.reshape(shape)?)?;
            }
            Op::Conv2d {
                x,
                kernel,
                stride,
                pad,
                cols,
            } => {
                let (dx, dk) = ops::conv2d_backward(
                    &g,
                    &self.nodes[*x].value,
                    &self.nodes[*kernel].value,
                    *stride,
                    *pad,
                    cols.as_deref(),
                    self.wants(*x),
                    self.wants(*kernel),
                )?;
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx)?;
                }
                if let Some(dk) = dk {
                    accumulate(grads, *kernel, dk)?;
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                reduction,
            } => {
                let seed = g.item()?;
                let k = probs.dim(1);
                let scale = match reduction {
                    Reduction::Mean if !labels.is_empty() => seed / labels.len() as f32,
                    _ => seed,
                };
                let mut d = probs.clone();
                let buf = d.data_mut();
                for (i, &y) in labels.iter().enumerate() {
                    buf[i * k + y] -= 1.0;
                }
                buf.iter_mut().for_each(|v| *v *= scale);
                accumulate(grads, *logits, d)?;
            }
            Op::Sum(x) => {
                let seed = g.item()?;
                accumulate(grads, *x, Tensor::full(self.nodes[*x].value.shape(), seed))?;
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], index: usize, g: Tensor) -> Result<()> {
    match &mut grads[index] {
        Some(existing) => {
            if existing.shape() != g.shape() {
                return Err(Error::dimension("accumulate", existing.shape(), g.shape()));
            }
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
    Ok(())
}

/// Gradients of one backward pass, keyed by leaf variable.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// The gradient for a tracked leaf; `None` for constants, intermediates
    /// and variables from other tapes.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.index).and_then(Option::take)
    }

    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn([2, 3], |i| i as f32));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &Tensor::full([2, 3], 1.0));
    }

    #[test]
    fn gradient_of_square_sum() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new([2], vec![1.0, -2.0]).unwrap());
        let a = tape.add(x, x).unwrap();
        let b = tape.add(a, x).unwrap();
        let s = tape.sum(b).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn foreign_loss_is_usage_error() {
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let x = t1.leaf(Tensor::scalar(1.0));
        let _ = t2.leaf(Tensor::scalar(1.0));
        assert!(matches!(t2.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn non_scalar_loss_is_usage_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros([2]));
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn constants_get_no_gradient_and_unused_leaves_get_zeros() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full([2], 2.0));
        let c = tape.constant(Tensor::full([2], 5.0));
        let unused = tape.leaf(Tensor::full([4], 1.0));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[5.0, 5.0]);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(unused).unwrap(), &Tensor::zeros([4]));
    }

    #[test]
    fn backward_can_be_repeated() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full([2], 3.0));
        let y = tape.mul(x, x).unwrap();
        let s = tape.sum(y).unwrap();
        let g1 = tape.backward(s).unwrap();
        let g2 = tape.backward(s).unwrap();
        assert!(g1.get(x).unwrap().bit_eq(g2.get(x).unwrap()));
    }
}
