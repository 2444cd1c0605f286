//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node holding its output value and enough context to
//! run its backward rule. Nodes are appended in execution order, so walking
//! the tape backwards is a valid reverse topological order.

use std::fmt;
use std::sync::Arc;

use crate::element::Element;
use crate::error::{GradError, Result};
use crate::ops::conv::{self, ConvGeom, Padding};
use crate::ops::norm::{self, NormCache};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Op kinds, used for diagnostics and per-kind gradient reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Leaf,
    Conv2d,
    Upsample,
    Relu,
    LeakyRelu,
    Tanh,
    Sigmoid,
    Clamp,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    InstanceNorm,
    Mean,
    Sum,
    L1Distance,
    BceWithLogits,
    Custom,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv2d => "conv2d",
            OpKind::Upsample => "upsample_nearest",
            OpKind::Relu => "relu",
            OpKind::LeakyRelu => "leaky_relu",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Clamp => "clamp",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::InstanceNorm => "instance_norm",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::L1Distance => "l1_distance",
            OpKind::BceWithLogits => "bce_with_logits",
            OpKind::Custom => "custom",
        };
        f.write_str(s)
    }
}

/// An op defined outside this crate.
///
/// `backward` returns one optional gradient per input, each shaped like that
/// input. Returning `None` means the op does not propagate into that input.
pub trait CustomOp<T: Element>: Send + Sync {
    fn name(&self) -> &str;

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>>;

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_out: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

enum Op<T: Element> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Upsample {
        input: Var,
        scale: usize,
    },
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Clamp(Var, T, T),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    InstanceNorm {
        input: Var,
        gain: Var,
        bias: Var,
        cache: NormCache<T>,
    },
    Mean(Var),
    Sum(Var),
    L1(Var, Var),
    Bce(Var, T),
    Custom {
        inputs: Vec<Var>,
        op: Arc<dyn CustomOp<T>>,
    },
}

impl<T: Element> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Upsample { .. } => OpKind::Upsample,
            Op::Relu(_) => OpKind::Relu,
            Op::LeakyRelu(..) => OpKind::LeakyRelu,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Clamp(..) => OpKind::Clamp,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(_) => OpKind::AddScalar,
            Op::InstanceNorm { .. } => OpKind::InstanceNorm,
            Op::Mean(_) => OpKind::Mean,
            Op::Sum(_) => OpKind::Sum,
            Op::L1(..) => OpKind::L1Distance,
            Op::Bce(..) => OpKind::BceWithLogits,
            Op::Custom { .. } => OpKind::Custom,
        }
    }
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records ops for one forward pass; owned by a single thread.
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    recording: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Gradients<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Ids of all variables that received a gradient.
    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.grads
            .iter()
            .enumerate()
            .filter(|(_, g)| g.is_some())
            .map(|(i, _)| Var(i))
    }
}

fn same_shape(op: &'static str, a: &Tensor<impl Element>, b: &Tensor<impl Element>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(GradError::shape(op, format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    Ok(())
}

/// Shape law for binary elementwise ops: equal shapes, or one side scalar.
fn broadcast_shape(op: &'static str, a: &Tensor<impl Element>, b: &Tensor<impl Element>) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.is_scalar() {
        Ok(a.shape().to_vec())
    } else if a.is_scalar() {
        Ok(b.shape().to_vec())
    } else {
        Err(GradError::shape(op, format!("{:?} or a scalar", a.shape()), format!("{:?}", b.shape())))
    }
}

fn bin_map<T: Element>(a: &Tensor<T>, b: &Tensor<T>, shape: &[usize], f: impl Fn(T, T) -> T) -> Vec<T> {
    let (ad, bd) = (a.data(), b.data());
    let n: usize = shape.iter().product();
    match (ad.len() == n, bd.len() == n) {
        (true, true) => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
        (true, false) => ad.iter().map(|&x| f(x, bd[0])).collect(),
        (false, true) => bd.iter().map(|&y| f(ad[0], y)).collect(),
        (false, false) => vec![f(ad[0], bd[0])],
    }
}

/// Reduce a broadcast gradient back onto an operand's shape.
fn unbroadcast<T: Element>(grad: Vec<T>, target: &Tensor<T>) -> Vec<T> {
    if grad.len() == target.numel() {
        grad
    } else {
        vec![grad.iter().copied().sum()]
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape that evaluates values but keeps no backward context.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Differentiable input (parameter or image we want gradients for).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let requires_grad = self.recording;
        self.push_raw(value, Op::Leaf, requires_grad)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(GradError::NonFinite {
                op: op.kind().to_string(),
            });
        }
        let requires_grad = self.recording && inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(GradError::UnknownVar(v.0))
        }
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: Padding) -> Result<Var> {
        self.check(input)?;
        self.check(weight)?;
        if let Some(b) = bias {
            self.check(b)?;
        }
        let (out, geom) = conv::conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let mut ins = vec![input, weight];
        ins.extend(bias);
        self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            &ins,
        )
    }

    pub fn upsample_nearest(&mut self, input: Var, scale: usize) -> Result<Var> {
        self.check(input)?;
        let out = conv::upsample_nearest_forward(self.value(input), scale)?;
        self.push(out, Op::Upsample { input, scale }, &[input])
    }

    /// Nearest-neighbour resize by `scale` followed by a stride-1 convolution.
    pub fn upsample_conv(&mut self, input: Var, scale: usize, weight: Var, bias: Option<Var>, pad: Padding) -> Result<Var> {
        if scale != 2 {
            return Err(GradError::shape("upsample_conv", "scale 2", scale.to_string()));
        }
        let up = self.upsample_nearest(input, scale)?;
        self.conv2d(up, weight, bias, 1, pad)
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).map(f);
        self.push(out, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Result<Var> {
        self.unary(x, Op::LeakyRelu(x, slope), |v| if v > T::zero() { v } else { v * slope })
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.max(lo).min(hi))
    }

    pub fn scale(&mut self, x: Var, k: T) -> Result<Var> {
        self.unary(x, Op::Scale(x, k), |v| v * k)
    }

    pub fn add_scalar(&mut self, x: Var, k: T) -> Result<Var> {
        self.unary(x, Op::AddScalar(x), |v| v + k)
    }

    fn binary(&mut self, op_name: &'static str, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(op_name, ta, tb)?;
        let out = Tensor::from_vec(&shape, bin_map(ta, tb, &shape, f))?;
        self.push(out, op, &[a, b])
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

    pub fn instance_norm(&mut self, input: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        self.check(input)?;
        self.check(gain)?;
        self.check(bias)?;
        let (out, cache) = norm::instance_norm_forward(self.value(input), self.value(gain), self.value(bias), eps)?;
        self.push(
            out,
            Op::InstanceNorm {
                input,
                gain,
                bias,
                cache,
            },
            &[input, gain, bias],
        )
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(GradError::shape("mean", "non-empty tensor", "0 elements"));
        }
        let out = Tensor::scalar(t.mean());
        self.push(out, Op::Mean(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    /// Mean absolute difference over all elements.
    pub fn l1_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("l1_distance", ta, tb)?;
        if ta.numel() == 0 {
            return Err(GradError::shape("l1_distance", "non-empty tensors", "0 elements"));
        }
        let total: T = ta.data().iter().zip(tb.data()).map(|(&x, &y)| (x - y).abs()).sum();
        let out = Tensor::scalar(total / T::from_usize(ta.numel()).unwrap());
        self.push(out, Op::L1(a, b), &[a, b])
    }

    /// Mean binary cross-entropy of `logits` against a constant target.
    pub fn bce_with_logits(&mut self, logits: Var, target: T) -> Result<Var> {
        self.check(logits)?;
        let t = self.value(logits);
        if t.numel() == 0 {
            return Err(GradError::shape("bce_with_logits", "non-empty tensor", "0 elements"));
        }
        let total: T = t
            .data()
            .iter()
            .map(|&z| z.max(T::zero()) - z * target + (-z.abs()).exp().ln_1p())
            .sum();
        let out = Tensor::scalar(total / T::from_usize(t.numel()).unwrap());
        self.push(out, Op::Bce(logits, target), &[logits])
    }

    pub fn custom(&mut self, op: Arc<dyn CustomOp<T>>, inputs: &[Var]) -> Result<Var> {
        for &i in inputs {
            self.check(i)?;
        }
        let values: Vec<&Tensor<T>> = inputs.iter().map(|&i| self.value(i)).collect();
        let out = op.forward(&values)?;
        if !out.all_finite() {
            return Err(GradError::NonFinite {
                op: op.name().to_string(),
            });
        }
        self.push(
            out,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            inputs,
        )
    }

    /// Gradients of scalar `root` with respect to every variable that
    /// requires one. Non-leaf gradients are released as soon as they have
    /// been propagated, so only leaves remain in the result.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        self.check(root)?;
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(GradError::NotScalar(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![T::one()]);
        }
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::from_vec(self.nodes[i].value.shape(), g).expect("grad shape")))
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let mut acc = |v: Var, contrib: Vec<T>| {
            if !self.wants(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e = *e + c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        let elementwise = |x: Var, f: &dyn Fn(T, T, T) -> T| -> Vec<T> {
            let xv = self.value(x).data();
            let yv = node.value.data();
            g.iter()
                .zip(xv)
                .zip(yv)
                .map(|((&gi, &xi), &yi)| f(gi, xi, yi))
                .collect()
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let cg = conv::conv2d_backward(
                    geom,
                    self.value(*input),
                    self.value(*weight),
                    g,
                    self.wants(*input),
                    self.wants(*weight),
                    bias.is_some_and(|b| self.wants(b)),
                );
                if let Some(dx) = cg.input {
                    acc(*input, dx);
                }
                if let Some(dw) = cg.weight {
                    acc(*weight, dw);
                }
                if let (Some(b), Some(db)) = (bias, cg.bias) {
                    acc(*b, db);
                }
            }
            Op::Upsample { input, scale } => {
                let dx = conv::upsample_nearest_backward(self.value(*input).shape(), g, *scale);
                acc(*input, dx);
            }
            Op::Relu(x) => acc(*x, elementwise(*x, &|gi, xi, _| if xi > T::zero() { gi } else { T::zero() })),
            Op::LeakyRelu(x, slope) => {
                let s = *slope;
                acc(*x, elementwise(*x, &|gi, xi, _| if xi > T::zero() { gi } else { gi * s }))
            }
            Op::Tanh(x) => acc(*x, elementwise(*x, &|gi, _, yi| gi * (T::one() - yi * yi))),
            Op::Sigmoid(x) => acc(*x, elementwise(*x, &|gi, _, yi| gi * yi * (T::one() - yi))),
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                acc(
                    *x,
                    elementwise(*x, &|gi, xi, _| if xi >= lo && xi <= hi { gi } else { T::zero() }),
                )
            }
            Op::Scale(x, k) => {
                let k = *k;
                acc(*x, g.iter().map(|&gi| gi * k).collect())
            }
            Op::AddScalar(x) => acc(*x, g.to_vec()),
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(*a, unbroadcast(g.to_vec(), self.value(*a)));
                }
                if self.wants(*b) {
                    acc(*b, unbroadcast(g.to_vec(), self.value(*b)));
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    acc(*a, unbroadcast(g.to_vec(), self.value(*a)));
                }
                if self.wants(*b) {
                    acc(*b, unbroadcast(g.iter().map(|&v| -v).collect(), self.value(*b)));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let shape = node.value.shape();
                if self.wants(*a) {
                    let prod = bin_map(&Tensor::from_vec(shape, g.to_vec())?, tb, shape, |gi, y| gi * y);
                    acc(*a, unbroadcast(prod, ta));
                }
                if self.wants(*b) {
                    let prod = bin_map(&Tensor::from_vec(shape, g.to_vec())?, ta, shape, |gi, x| gi * x);
                    acc(*b, unbroadcast(prod, tb));
                }
            }
            Op::InstanceNorm {
                input,
                gain,
                bias,
                cache,
            } => {
                let ng = norm::instance_norm_backward(node.value.shape(), self.value(*gain), cache, g);
                acc(*input, ng.input);
                acc(*gain, ng.gain);
                acc(*bias, ng.bias);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let v = g[0] / T::from_usize(n).unwrap();
                acc(*x, vec![v; n]);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                acc(*x, vec![g[0]; n]);
            }
            Op::L1(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let k = g[0] / T::from_usize(ta.numel()).unwrap();
                let signs: Vec<T> = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(&x, &y)| {
                        if x > y {
                            k
                        } else if x < y {
                            -k
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                if self.wants(*b) {
                    acc(*b, signs.iter().map(|&s| -s).collect());
                }
                acc(*a, signs);
            }
            Op::Bce(x, target) => {
                let t = self.value(*x);
                let k = g[0] / T::from_usize(t.numel()).unwrap();
                let tg = *target;
                acc(*x, t.data().iter().map(|&z| k * (sigmoid(z) - tg)).collect());
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|&i| self.value(i)).collect();
                let go = Tensor::from_vec(node.value.shape(), g.to_vec())?;
                let gs = op.backward(&values, &node.value, &go)?;
                for (v, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        if gi.shape() != self.value(*v).shape() {
                            return Err(GradError::shape(
                                "custom backward",
                                format!("{:?}", self.value(*v).shape()),
                                format!("{:?}", gi.shape()),
                            ));
                        }
                        acc(*v, gi.into_vec());
                    }
                }
            }
        }
        Ok(())
    }
}

fn sigmoid<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
