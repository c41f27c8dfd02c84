//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Each op appends a node holding its output value and enough context to
//! replay its adjoint. `backward` walks the tape in reverse once; leaf
//! gradients accumulate across calls until [`Tape::zero_grad`].

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::loss::LossConfig;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Conv2d { input: Var, weight: Var, geom: ConvGeom },
    ConvTranspose2d { input: Var, weight: Var, geom: ConvGeom },
    AvgPool2d { input: Var, window: usize },
    Concat { a: Var, b: Var, ca: usize, cb: usize },
    SliceChannels { input: Var, start: usize, total: usize },
    Relu { input: Var },
    Sigmoid { input: Var },
    Dropout { input: Var, mask: Vec<S> },
    Scale { input: Var, factor: S },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Sum { input: Var },
    Loss { pred: Var, grad: Tensor<S> },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
    grad: Option<Tensor<S>>,
}

#[derive(Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input or parameter.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<S>> {
        self.nodes[v.0].grad.take()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, name: &str, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("output of {name}")));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Bias-free 2D cross-correlation, weight `[cout, cin, k, k]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let geom = ConvGeom::conv(x.dims4()?, w.shape(), stride, padding)?;
        let y = kernels::conv2d_forward(x.data(), w.data(), &geom);
        let y = Tensor::new(vec![geom.batch, geom.cout, geom.ho, geom.wo], y)?;
        self.push("conv2d", y, Op::Conv2d { input, weight, geom }, &[input, weight])
    }

    /// Bias-free transposed convolution, weight `[cin, cout, k, k]`.
    pub fn conv_transpose2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let geom = ConvGeom::transposed(x.dims4()?, w.shape(), stride, padding)?;
        let y = kernels::conv2d_backward_input(x.data(), w.data(), &geom);
        let y = Tensor::new(vec![geom.batch, geom.cin, geom.h, geom.w], y)?;
        self.push(
            "conv_transpose2d",
            y,
            Op::ConvTranspose2d { input, weight, geom },
            &[input, weight],
        )
    }

    pub fn avg_pool2d(&mut self, input: Var, window: usize) -> Result<Var> {
        let x = self.value(input);
        let (b, c, h, w) = x.dims4()?;
        if window == 0 || h % window != 0 || w % window != 0 {
            return Err(shape_err!(
                "spatial dims {h}x{w} not divisible by pooling window {window}"
            ));
        }
        let y = kernels::avg_pool_forward(x.data(), (b, c, h, w), window);
        let y = Tensor::new(vec![b, c, h / window, w / window], y)?;
        self.push("avg_pool2d", y, Op::AvgPool2d { input, window }, &[input])
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, ca, ha, wa) = self.value(a).dims4()?;
        let (bb, cb, hb, wb) = self.value(b).dims4()?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(shape_err!(
                "concat needs equal batch/spatial dims, got {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let y = kernels::concat_channels(self.value(a).data(), ca, self.value(b).data(), cb, ba, ha * wa);
        let y = Tensor::new(vec![ba, ca + cb, ha, wa], y)?;
        self.push("concat", y, Op::Concat { a, b, ca, cb }, &[a, b])
    }

    /// Channels `start..start+len` of a rank-4 tensor.
    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(input).dims4()?;
        if len == 0 || start + len > c {
            return Err(shape_err!("channel slice {start}..{} of {c}", start + len));
        }
        let x = self.value(input).data();
        let mut y = Vec::with_capacity(b * len * h * w);
        for n in 0..b {
            y.extend_from_slice(&x[(n * c + start) * h * w..(n * c + start + len) * h * w]);
        }
        let y = Tensor::new(vec![b, len, h, w], y)?;
        self.push("slice_channels", y, Op::SliceChannels { input, start, total: c }, &[input])
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let y = self.value(input).map(|x| if x > S::zero() { x } else { S::zero() });
        self.push("relu", y, Op::Relu { input }, &[input])
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let y = self.value(input).map(sigmoid);
        self.push("sigmoid", y, Op::Sigmoid { input }, &[input])
    }

    /// Inverted dropout; identity when `!training` or `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(input);
        }
        let mask = dropout_mask(self.value(input).numel(), rate, rng);
        let x = self.value(input);
        let y = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect(),
        )?;
        self.push("dropout", y, Op::Dropout { input, mask }, &[input])
    }

    pub fn scale(&mut self, input: Var, factor: S) -> Result<Var> {
        let y = self.value(input).scale(factor);
        self.push("scale", y, Op::Scale { input, factor }, &[input])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let y = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push("add", y, Op::Add { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let y = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push("mul", y, Op::Mul { a, b }, &[a, b])
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(input).sum());
        self.push("sum", y, Op::Sum { input }, &[input])
    }

    /// Scalar segmentation loss of `pred` against a constant target.
    pub fn loss(&mut self, pred: Var, target: &Tensor<S>, cfg: &LossConfig) -> Result<Var> {
        let (value, grad) = cfg.value_and_grad(self.value(pred), target, true)?;
        let grad = grad.expect("gradient requested");
        self.push("loss", Tensor::scalar(value), Op::Loss { pred, grad }, &[pred])
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err!(
                "{op} needs equal shapes, got {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        Ok(())
    }

    /// Propagates d(loss)/d(node) back to every leaf that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Usage("backward on an empty tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Vec<S>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let node = &self.nodes[i];
            let send = |v: Var, d: Vec<S>, adj: &mut Vec<Option<Vec<S>>>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut adj[v.0] {
                    Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => {
                    let g = Tensor::new(node.value.shape().to_vec(), g)?;
                    let node = &mut self.nodes[i];
                    match &mut node.grad {
                        Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += *b),
                        None => node.grad = Some(g),
                    }
                }
                Op::Conv2d { input, weight, geom } => {
                    if self.nodes[input.0].requires_grad {
                        let w = self.nodes[weight.0].value.data();
                        send(*input, kernels::conv2d_backward_input(&g, w, geom), &mut adj);
                    }
                    if self.nodes[weight.0].requires_grad {
                        let mut dw = vec![S::zero(); self.nodes[weight.0].value.numel()];
                        kernels::conv2d_backward_weight(self.nodes[input.0].value.data(), &g, geom, &mut dw);
                        send(*weight, dw, &mut adj);
                    }
                }
                Op::ConvTranspose2d { input, weight, geom } => {
                    if self.nodes[input.0].requires_grad {
                        let w = self.nodes[weight.0].value.data();
                        send(*input, kernels::conv2d_forward(&g, w, geom), &mut adj);
                    }
                    if self.nodes[weight.0].requires_grad {
                        let mut dw = vec![S::zero(); self.nodes[weight.0].value.numel()];
                        kernels::conv2d_backward_weight(&g, self.nodes[input.0].value.data(), geom, &mut dw);
                        send(*weight, dw, &mut adj);
                    }
                }
                Op::AvgPool2d { input, window } => {
                    let dims = self.nodes[input.0].value.dims4()?;
                    send(*input, kernels::avg_pool_backward(&g, dims, *window), &mut adj);
                }
                Op::Concat { a, b, ca, cb } => {
                    let (batch, _, h, w) = node.value.dims4()?;
                    let (da, db) = kernels::split_channels(&g, *ca, *cb, batch, h * w);
                    send(*a, da, &mut adj);
                    send(*b, db, &mut adj);
                }
                Op::SliceChannels { input, start, total } => {
                    let (batch, len, h, w) = node.value.dims4()?;
                    let mut d = vec![S::zero(); batch * total * h * w];
                    for n in 0..batch {
                        d[(n * total + start) * h * w..(n * total + start + len) * h * w]
                            .copy_from_slice(&g[n * len * h * w..(n + 1) * len * h * w]);
                    }
                    send(*input, d, &mut adj);
                }
                Op::Relu { input } => {
                    let x = self.nodes[input.0].value.data();
                    let d = g
                        .iter()
                        .zip(x)
                        .map(|(&gi, &xi)| if xi > S::zero() { gi } else { S::zero() })
                        .collect();
                    send(*input, d, &mut adj);
                }
                Op::Sigmoid { input } => {
                    let y = node.value.data();
                    let d = g.iter().zip(y).map(|(&gi, &yi)| gi * yi * (S::one() - yi)).collect();
                    send(*input, d, &mut adj);
                }
                Op::Dropout { input, mask } => {
                    let d = g.iter().zip(mask).map(|(&gi, &m)| gi * m).collect();
                    send(*input, d, &mut adj);
                }
                Op::Scale { input, factor } => {
                    send(*input, g.iter().map(|&gi| gi * *factor).collect(), &mut adj);
                }
                Op::Add { a, b } => {
                    send(*a, g.clone(), &mut adj);
                    send(*b, g, &mut adj);
                }
                Op::Mul { a, b } => {
                    let av = self.nodes[a.0].value.data();
                    let bv = self.nodes[b.0].value.data();
                    send(*a, g.iter().zip(bv).map(|(&gi, &y)| gi * y).collect(), &mut adj);
                    send(*b, g.iter().zip(av).map(|(&gi, &x)| gi * x).collect(), &mut adj);
                }
                Op::Sum { input } => {
                    let n = self.nodes[input.0].value.numel();
                    send(*input, vec![g[0]; n], &mut adj);
                }
                Op::Loss { pred, grad } => {
                    send(*pred, grad.data().iter().map(|&x| x * g[0]).collect(), &mut adj);
                }
            }
        }
        Ok(())
    }
}

fn zip_map<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    Tensor::from_fn(a.shape(), |i| f(a.data()[i], b.data()[i]))
}

/// Overflow-free logistic function.
pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Inverted-dropout mask: 0 with probability `rate`, else `1 / (1 - rate)`.
pub fn dropout_mask<S: Scalar, R: Rng + ?Sized>(n: usize, rate: f64, rng: &mut R) -> Vec<S> {
    let keep = S::lit(1.0 / (1.0 - rate));
    (0..n)
        .map(|_| if rng.random::<f64>() < rate { S::zero() } else { keep })
        .collect()
}
