//! Reverse-mode gradient tape.
//!
//! Every operation appends a node holding its output value. `backward` walks
//! the nodes in exact reverse order of recording and accumulates adjoints
//! additively, so a value consumed by several operations receives the sum of
//! their contributions.

use crate::error::{Error, Result};
use crate::ops::{self, Resize};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
    },
    Depthwise {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
    },
    Pointwise {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    /// Per-channel weight broadcast over every pixel.
    ChannelMul(Var, Var),
    ChannelAdd(Var, Var),
    Concat(Var, Var),
    Resize(Var, Resize),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<u8>,
    },
    Sum(Var),
    Mean(Var),
    Scale(Var, f64),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Depthwise { .. } => "depthwise_conv2d",
            Op::Pointwise { .. } => "pointwise_conv2d",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::ChannelMul(..) => "channel_mul",
            Op::ChannelAdd(..) => "channel_add",
            Op::Concat(..) => "concat_channels",
            Op::Resize(..) => "resize_bilinear",
            Op::Softmax(_) => "softmax_channels",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Scale(..) => "scale",
        }
    }

    pub fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { input, kernel, bias }
            | Op::Depthwise { input, kernel, bias }
            | Op::Pointwise { input, kernel, bias } => {
                let mut v = vec![*input, *kernel];
                v.extend(bias);
                v
            }
            Op::Add(a, b) | Op::Mul(a, b) | Op::ChannelMul(a, b) | Op::ChannelAdd(a, b) | Op::Concat(a, b) => {
                vec![*a, *b]
            }
            Op::Sigmoid(a) | Op::Tanh(a) | Op::Relu(a) | Op::Softmax(a) | Op::Sum(a) | Op::Mean(a) => vec![*a],
            Op::Resize(a, _) | Op::Scale(a, _) => vec![*a],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    macs: Option<u64>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            macs: None,
            consumed: false,
        }
    }

    /// A tape that counts multiply-accumulates of every convolution it records.
    pub fn instrumented() -> Self {
        Tape {
            macs: Some(0),
            ..Tape::new()
        }
    }

    pub fn macs(&self) -> Result<u64> {
        self.macs.ok_or(Error::InstrumentationDisabled)
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
        if let Some(m) = self.macs.as_mut() {
            *m = 0;
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Recorded operations in execution order.
    pub fn ops(&self) -> impl Iterator<Item = (Var, &Op)> {
        self.nodes.iter().enumerate().map(|(i, n)| (Var(i), &n.op))
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn count(&mut self, macs: usize) {
        if let Some(m) = self.macs.as_mut() {
            *m += macs as u64;
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let out = ops::conv2d(self.value(input), self.value(kernel), bias.map(|b| self.value(b)))?;
        let (ks, s) = (self.shape(kernel), out.shape());
        self.count(s.n * ks.n * ks.c * ks.h * ks.w * s.plane());
        self.push(out, Op::Conv2d { input, kernel, bias })
    }

    pub fn depthwise_conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let out = ops::depthwise_conv2d(self.value(input), self.value(kernel), bias.map(|b| self.value(b)))?;
        let (ks, s) = (self.shape(kernel), out.shape());
        self.count(s.n * s.c * ks.h * ks.w * s.plane());
        self.push(out, Op::Depthwise { input, kernel, bias })
    }

    pub fn pointwise_conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let out = ops::pointwise_conv2d(self.value(input), self.value(kernel), bias.map(|b| self.value(b)))?;
        let (ks, s) = (self.shape(kernel), out.shape());
        self.count(s.n * ks.n * ks.c * s.plane());
        self.push(out, Op::Pointwise { input, kernel, bias })
    }

    fn zip(&mut self, op: Op, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_vec(ta.shape(), data)?;
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(Op::Add(a, b), a, b, |x, y| x + y)
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(ops::sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.tanh());
        self.push(out, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(a))
    }

    pub fn channel_mul(&mut self, x: Var, weights: Var) -> Result<Var> {
        let out = ops::channel_broadcast(self.value(x), self.value(weights), |a, w| a * w)?;
        self.push(out, Op::ChannelMul(x, weights))
    }

    pub fn channel_add(&mut self, x: Var, shift: Var) -> Result<Var> {
        let out = ops::channel_broadcast(self.value(x), self.value(shift), |a, b| a + b)?;
        self.push(out, Op::ChannelAdd(x, shift))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::concat_channels(self.value(a), self.value(b))?;
        self.push(out, Op::Concat(a, b))
    }

    pub fn resize_bilinear(&mut self, a: Var, factor: Resize) -> Result<Var> {
        let out = ops::resize_bilinear(self.value(a), factor)?;
        self.push(out, Op::Resize(a, factor))
    }

    pub fn softmax_channels(&mut self, a: Var) -> Result<Var> {
        let out = ops::softmax_channels(self.value(a));
        self.push(out, Op::Softmax(a))
    }

    /// Mean per-pixel cross-entropy; `labels` is laid out `[n, h, w]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        let loss = ops::softmax_cross_entropy(self.value(logits), labels)?;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / T::of(t.len() as f64));
        self.push(out, Op::Mean(a))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let f = T::of(factor);
        let out = self.value(a).map(|v| v * f);
        self.push(out, Op::Scale(a, factor))
    }

    /// Reverse pass from a scalar `loss`. May run once per recording.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let ls = self.shape(loss);
        if ls.numel() != 1 {
            return Err(Error::NonScalarLoss(ls.dims()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            for (input, contribution) in self.adjoint(&node.op, &node.value, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(contribution.data())
                        .for_each(|(a, &c)| *a += c),
                    slot @ None => *slot = Some(contribution),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Contributions of one node's output adjoint to its inputs.
    fn adjoint(&self, op: &Op, out: &Tensor<T>, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let val = |v: Var| &self.nodes[v.0].value;
        let need = |v: Var| self.nodes[v.0].requires_grad;
        let zip = |a: &Tensor<T>, f: &dyn Fn(T, T) -> T| {
            let data = a.data().iter().zip(g.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_vec(a.shape(), data).expect("adjoint extents")
        };
        match op {
            Op::Leaf => vec![],
            Op::Conv2d { input, kernel, bias }
            | Op::Depthwise { input, kernel, bias }
            | Op::Pointwise { input, kernel, bias } => {
                let backward = match op {
                    Op::Conv2d { .. } => ops::conv2d_backward,
                    Op::Depthwise { .. } => ops::depthwise_conv2d_backward,
                    _ => ops::pointwise_conv2d_backward,
                };
                let r = backward(val(*input), val(*kernel), g, need(*input));
                let mut v = vec![(*kernel, r.kernel)];
                if let Some(gi) = r.input {
                    v.push((*input, gi));
                }
                if let Some(b) = bias {
                    v.push((*b, r.bias));
                }
                v
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul(a, b) => vec![(*a, zip(val(*b), &|y, gv| y * gv)), (*b, zip(val(*a), &|x, gv| x * gv))],
            Op::Sigmoid(a) => vec![(*a, zip(out, &|s, gv| gv * s * (T::one() - s)))],
            Op::Tanh(a) => vec![(*a, zip(out, &|t, gv| gv * (T::one() - t * t)))],
            Op::Relu(a) => vec![(*a, zip(val(*a), &|x, gv| if x > T::zero() { gv } else { T::zero() }))],
            Op::ChannelMul(x, w) => {
                let gx = ops::channel_broadcast(g, val(*w), |gv, wv| gv * wv).expect("adjoint extents");
                let prod = zip(val(*x), &|xv, gv| xv * gv);
                vec![(*x, gx), (*w, ops::channel_sums(&prod))]
            }
            Op::ChannelAdd(x, b) => vec![(*x, g.clone()), (*b, ops::channel_sums(g))],
            Op::Concat(a, b) => {
                let (ga, gb) = ops::split_channels(g, val(*a).shape().c);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Resize(a, _) => vec![(*a, ops::resize_bilinear_backward(val(*a).shape(), g))],
            Op::Softmax(a) => vec![(*a, ops::softmax_channels_backward(out, g))],
            Op::CrossEntropy { logits, labels } => vec![(
                *logits,
                ops::softmax_cross_entropy_backward(val(*logits), labels, g.data()[0]),
            )],
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.data()[0]))],
            Op::Mean(a) => {
                let t = val(*a);
                let v = g.data()[0] / T::of(t.len() as f64);
                vec![(*a, Tensor::full(t.shape(), v))]
            }
            Op::Scale(a, f) => {
                let f = T::of(*f);
                vec![(*a, g.map(|v| v * f))]
            }
        }
    }
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// `None` when no path connects `v` to the loss or `v` does not require a gradient.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
