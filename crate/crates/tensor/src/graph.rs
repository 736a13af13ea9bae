//! Reverse-mode differentiation over a tape of tensor operations.
//!
//! A [`Graph`] owns every value it produces. Nodes are appended in evaluation order, so
//! the tape is topologically sorted by construction and [`Graph::backward`] walks it
//! once in reverse. Leaves created with [`Graph::param`] accumulate gradients across
//! backward calls until [`Graph::zero_grad`].

use crate::error::{Result, TensorError};
use crate::kernels::conv::{self, ConvGeom};
use crate::kernels::norm::{self, NormKind, NormStats};
use crate::kernels::softmax;
use crate::{Scalar, Shape, Tensor};

/// Handle to a node of one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Depthwise {
        input: Var,
        kernel: Var,
        bias: Var,
    },
    ConvTranspose {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Concat(Var, Var),
    Normalize {
        input: Var,
        gain: Var,
        bias: Var,
        kind: NormKind,
        stats: NormStats<T>,
    },
    Lerp {
        weight: Var,
        a: Var,
        b: Var,
    },
    SoftmaxXent {
        logits: Var,
        labels: Vec<T>,
        mask: Vec<bool>,
        probs: Vec<T>,
        count: usize,
    },
    Sum(Var),
    WeightedSum(Var, Vec<T>),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                kernel,
                bias,
                ..
            }
            | Op::Depthwise {
                input,
                kernel,
                bias,
            }
            | Op::ConvTranspose {
                input,
                kernel,
                bias,
                ..
            } => vec![*input, *kernel, *bias],
            Op::Relu(x) | Op::Sigmoid(x) | Op::Scale(x, _) | Op::Sum(x) => vec![*x],
            Op::WeightedSum(x, _) => vec![*x],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Concat(a, b) => vec![*a, *b],
            Op::Normalize {
                input, gain, bias, ..
            } => vec![*input, *gain, *bias],
            Op::Lerp { weight, a, b } => vec![*weight, *a, *b],
            Op::SoftmaxXent { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    tracked: bool,
    grad: Option<Tensor<T>>,
}

#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    eps: T,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            eps: T::of(1e-5),
        }
    }

    /// Normalization epsilon used by [`Graph::normalize`] (default `1e-5`).
    pub fn with_norm_eps(mut self, eps: T) -> Self {
        self.eps = eps;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Untracked input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Trainable leaf; gradients accumulate into it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            tracked: requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a parameter leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn check(&self, v: Var) -> Result<&Tensor<T>> {
        self.nodes
            .get(v.0)
            .map(|n| &n.value)
            .ok_or(TensorError::UnknownVar(v.0))
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let tracked = op.inputs().iter().any(|i| self.nodes[i.0].tracked);
        self.nodes.push(Node {
            value,
            op,
            requires_grad: false,
            tracked,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Zero-padded cross-correlation with `[k, k, cin, cout]` kernels, `k` in {1, 3}.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        let (b, h, w, cin) = self.check(input)?.shape().nhwc()?;
        let kdims = self.check(kernel)?.dims().to_vec();
        let [kh, kw, kc, cout] = kdims[..] else {
            return Err(TensorError::shape(
                OP,
                "[k, k, cin, cout]",
                self.value(kernel).shape(),
            ));
        };
        if kh != kw || !(kh == 1 || kh == 3) {
            return Err(TensorError::invalid(
                OP,
                format!("kernel {kh}x{kw} not 1x1 or 3x3"),
            ));
        }
        if !(stride == 1 || stride == 2) {
            return Err(TensorError::invalid(
                OP,
                format!("stride {stride} not 1 or 2"),
            ));
        }
        if kc != cin {
            return Err(TensorError::shape(OP, format!("kernel cin {cin}"), kc));
        }
        if self.check(bias)?.dims() != [cout] {
            return Err(TensorError::shape(
                OP,
                format!("[{cout}]"),
                self.value(bias).shape(),
            ));
        }
        let geom = ConvGeom::same(b, h, w, cin, kh, cout, stride);
        let out = conv::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        let value = Tensor::from_vec([b, geom.oh, geom.ow, cout], out)?;
        self.push(
            OP,
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
        )
    }

    /// Per-channel 3x3 convolution, stride 1, zero padding. Kernel `[3, 3, c]`.
    pub fn depthwise_conv3x3(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        const OP: &str = "depthwise_conv3x3";
        let dims = self.check(input)?.shape().nhwc()?;
        let c = dims.3;
        if self.check(kernel)?.dims() != [3, 3, c] {
            return Err(TensorError::shape(
                OP,
                format!("[3, 3, {c}]"),
                self.value(kernel).shape(),
            ));
        }
        if self.check(bias)?.dims() != [c] {
            return Err(TensorError::shape(
                OP,
                format!("[{c}]"),
                self.value(bias).shape(),
            ));
        }
        let out = conv::depthwise_forward(
            dims,
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        let value = Tensor::from_vec(self.value(input).shape().clone(), out)?;
        self.push(
            OP,
            value,
            Op::Depthwise {
                input,
                kernel,
                bias,
            },
        )
    }

    /// Stride-2 transposed 3x3 convolution doubling both spatial extents.
    ///
    /// Kernel `[3, 3, cout, cin]`; the op is the input-adjoint of a stride-2 `conv2d`
    /// from `cout` to `cin` channels, plus a `[cout]` bias.
    pub fn transpose_conv2d_s2(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        const OP: &str = "transpose_conv2d_s2";
        let (b, h, w, cin) = self.check(input)?.shape().nhwc()?;
        let kdims = self.check(kernel)?.dims().to_vec();
        let [3, 3, cout, kc] = kdims[..] else {
            return Err(TensorError::shape(
                OP,
                "[3, 3, cout, cin]",
                self.value(kernel).shape(),
            ));
        };
        if kc != cin {
            return Err(TensorError::shape(OP, format!("kernel cin {cin}"), kc));
        }
        if self.check(bias)?.dims() != [cout] {
            return Err(TensorError::shape(
                OP,
                format!("[{cout}]"),
                self.value(bias).shape(),
            ));
        }
        let geom = ConvGeom::same(b, 2 * h, 2 * w, cout, 3, cin, 2);
        debug_assert_eq!((geom.oh, geom.ow), (h, w));
        let out = conv::conv_transpose_forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        let value = Tensor::from_vec([b, 2 * h, 2 * w, cout], out)?;
        self.push(
            OP,
            value,
            Op::ConvTranspose {
                input,
                kernel,
                bias,
                geom,
            },
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.check(x)?.map(|a| a.max(T::zero()));
        self.push("relu", v, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.check(x)?.map(sigmoid);
        self.push("sigmoid", v, Op::Sigmoid(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(b)?;
        let v = self.check(a)?.zip_map(self.value(b), |x, y| x + y)?;
        self.push("add", v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(b)?;
        let v = self.check(a)?.zip_map(self.value(b), |x, y| x - y)?;
        self.push("sub", v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(b)?;
        let v = self.check(a)?.zip_map(self.value(b), |x, y| x * y)?;
        self.push("mul", v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let v = self.check(a)?.map(|x| x * s);
        self.push("scale", v, Op::Scale(a, s))
    }

    /// Channel-axis concatenation of two rank-4 tensors with equal `(b, h, w)`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "concat_channels";
        let (n, h, w, ca) = self.check(a)?.shape().nhwc()?;
        let (nb, hb, wb, cb) = self.check(b)?.shape().nhwc()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(TensorError::shape(
                OP,
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * h * w * (ca + cb));
        for p in 0..n * h * w {
            out.extend_from_slice(&xa[p * ca..(p + 1) * ca]);
            out.extend_from_slice(&xb[p * cb..(p + 1) * cb]);
        }
        let value = Tensor::from_vec([n, h, w, ca + cb], out)?;
        self.push(OP, value, Op::Concat(a, b))
    }

    /// Standardizes over the axes of `kind`, then applies per-channel `gain` and `bias`.
    /// `NormKind::None` returns `input` unchanged.
    pub fn normalize(&mut self, input: Var, kind: NormKind, gain: Var, bias: Var) -> Result<Var> {
        const OP: &str = "normalize";
        let (b, h, w, c) = self.check(input)?.shape().nhwc()?;
        if kind.is_none() {
            return Ok(input);
        }
        if kind.group_size(b, h * w, c) == 0 {
            return Err(TensorError::EmptyAxis { op: OP });
        }
        for p in [gain, bias] {
            if self.check(p)?.dims() != [c] {
                return Err(TensorError::shape(
                    OP,
                    format!("[{c}]"),
                    self.value(p).shape(),
                ));
            }
        }
        let (out, stats) = norm::norm_forward(
            kind,
            (b, h * w, c),
            self.value(input).data(),
            self.value(gain).data(),
            self.value(bias).data(),
            self.eps,
        );
        let value = Tensor::from_vec([b, h, w, c], out)?;
        self.push(
            OP,
            value,
            Op::Normalize {
                input,
                gain,
                bias,
                kind,
                stats,
            },
        )
    }

    /// `weight * a + (1 - weight) * b`, with a `[b, h, w, 1]` weight broadcast over channels.
    pub fn lerp(&mut self, weight: Var, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "lerp";
        let (n, h, w, one) = self.check(weight)?.shape().nhwc()?;
        let sa = self.check(a)?.shape().clone();
        let sb = self.check(b)?.shape().clone();
        let (na, ha, wa, c) = sa.nhwc()?;
        if one != 1 || (n, h, w) != (na, ha, wa) || sa != sb {
            return Err(TensorError::shape(
                OP,
                &sa,
                format!("{} / {}", self.value(weight).shape(), sb),
            ));
        }
        let (wv, av, bv) = (
            self.value(weight).data(),
            self.value(a).data(),
            self.value(b).data(),
        );
        let mut out = vec![T::zero(); av.len()];
        for p in 0..n * h * w {
            let r = wv[p];
            for i in p * c..(p + 1) * c {
                out[i] = r * av[i] + (T::one() - r) * bv[i];
            }
        }
        let value = Tensor::from_vec(sa, out)?;
        self.push(OP, value, Op::Lerp { weight, a, b })
    }

    /// Masked mean pixel cross-entropy. Returns the scalar loss and the number of
    /// contributing pixels; with no contributing pixels the loss is 0 with zero gradient.
    pub fn softmax_xent(
        &mut self,
        logits: Var,
        labels: &Tensor<T>,
        mask: &[bool],
    ) -> Result<(Var, usize)> {
        const OP: &str = "softmax_xent";
        let (b, h, w, c) = self.check(logits)?.shape().nhwc()?;
        if labels.shape() != self.value(logits).shape() {
            return Err(TensorError::shape(
                OP,
                self.value(logits).shape(),
                labels.shape(),
            ));
        }
        if mask.len() != b {
            return Err(TensorError::shape(OP, format!("mask of {b}"), mask.len()));
        }
        let fwd = softmax::xent_forward(self.value(logits).data(), labels.data(), c, h * w, mask);
        let count = fwd.count;
        let var = self.push(
            OP,
            Tensor::scalar(fwd.loss),
            Op::SoftmaxXent {
                logits,
                labels: labels.data().to_vec(),
                mask: mask.to_vec(),
                probs: fwd.probs,
                count,
            },
        )?;
        Ok((var, count))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.check(x)?.sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x))
    }

    /// `sum(weights * x)` with constant weights of the same shape.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        let xv = self.check(x)?;
        if xv.shape() != weights.shape() {
            return Err(TensorError::shape(
                "weighted_sum",
                xv.shape(),
                weights.shape(),
            ));
        }
        let s = xv
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .sum();
        self.push(
            "weighted_sum",
            Tensor::scalar(s),
            Op::WeightedSum(x, weights.data().to_vec()),
        )
    }

    /// Propagates d(loss)/d(node) to every tracked node and accumulates into parameter
    /// leaves.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = self
            .nodes
            .get(loss.0)
            .ok_or(TensorError::UnknownVar(loss.0))?;
        if root.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().clone()));
        }
        if !root.tracked {
            return Ok(());
        }
        for (i, n) in self.nodes[..=loss.0].iter().enumerate() {
            if n.op.inputs().iter().any(|v| v.0 >= i) {
                return Err(TensorError::Cycle(i));
            }
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            if !self.nodes[i].tracked {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                let g = Tensor::from_vec(node.value.shape().clone(), dy)?;
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&g)?,
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(i, &dy, &mut grads);
        }
        Ok(())
    }

    fn take_slot(&self, grads: &mut [Option<Vec<T>>], v: Var) -> Option<Vec<T>> {
        if !self.nodes[v.0].tracked {
            return None;
        }
        Some(
            grads[v.0]
                .take()
                .unwrap_or_else(|| vec![T::zero(); self.nodes[v.0].value.len()]),
        )
    }

    fn put_slot(grads: &mut [Option<Vec<T>>], v: Var, g: Option<Vec<T>>) {
        let Some(g) = g else { return };
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let mut gi = self.take_slot(grads, *input);
                let mut gk = self.take_slot(grads, *kernel);
                let mut gb = self.take_slot(grads, *bias);
                conv::conv2d_backward(
                    geom,
                    val(*input),
                    val(*kernel),
                    dy,
                    gi.as_deref_mut(),
                    gk.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                Self::put_slot(grads, *input, gi);
                Self::put_slot(grads, *kernel, gk);
                Self::put_slot(grads, *bias, gb);
            }
            Op::Depthwise {
                input,
                kernel,
                bias,
            } => {
                let dims = self.nodes[input.0].value.shape().nhwc().expect("checked");
                let mut gi = self.take_slot(grads, *input);
                let mut gk = self.take_slot(grads, *kernel);
                let mut gb = self.take_slot(grads, *bias);
                conv::depthwise_backward(
                    dims,
                    val(*input),
                    val(*kernel),
                    dy,
                    gi.as_deref_mut(),
                    gk.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                Self::put_slot(grads, *input, gi);
                Self::put_slot(grads, *kernel, gk);
                Self::put_slot(grads, *bias, gb);
            }
            Op::ConvTranspose {
                input,
                kernel,
                bias,
                geom,
            } => {
                let mut gi = self.take_slot(grads, *input);
                let mut gk = self.take_slot(grads, *kernel);
                let mut gb = self.take_slot(grads, *bias);
                conv::conv_transpose_backward(
                    geom,
                    val(*input),
                    val(*kernel),
                    dy,
                    gi.as_deref_mut(),
                    gk.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                Self::put_slot(grads, *input, gi);
                Self::put_slot(grads, *kernel, gk);
                Self::put_slot(grads, *bias, gb);
            }
            Op::Relu(x) => {
                let y = node.value.data();
                let g = self.take_slot(grads, *x).map(|mut g| {
                    for ((gv, &d), &yv) in g.iter_mut().zip(dy).zip(y) {
                        if yv > T::zero() {
                            *gv += d;
                        }
                    }
                    g
                });
                Self::put_slot(grads, *x, g);
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let g = self.take_slot(grads, *x).map(|mut g| {
                    for ((gv, &d), &yv) in g.iter_mut().zip(dy).zip(y) {
                        *gv += d * yv * (T::one() - yv);
                    }
                    g
                });
                Self::put_slot(grads, *x, g);
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                let ga = self.take_slot(grads, *a).map(|mut g| {
                    g.iter_mut().zip(dy).for_each(|(gv, &d)| *gv += d);
                    g
                });
                Self::put_slot(grads, *a, ga);
                let gb = self.take_slot(grads, *b).map(|mut g| {
                    g.iter_mut().zip(dy).for_each(|(gv, &d)| *gv += sign * d);
                    g
                });
                Self::put_slot(grads, *b, gb);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let ga = self.take_slot(grads, *a).map(|mut g| {
                    for ((gv, &d), &o) in g.iter_mut().zip(dy).zip(bv) {
                        *gv += d * o;
                    }
                    g
                });
                Self::put_slot(grads, *a, ga);
                let gb = self.take_slot(grads, *b).map(|mut g| {
                    for ((gv, &d), &o) in g.iter_mut().zip(dy).zip(av) {
                        *gv += d * o;
                    }
                    g
                });
                Self::put_slot(grads, *b, gb);
            }
            Op::Scale(x, s) => {
                let g = self.take_slot(grads, *x).map(|mut g| {
                    g.iter_mut().zip(dy).for_each(|(gv, &d)| *gv += *s * d);
                    g
                });
                Self::put_slot(grads, *x, g);
            }
            Op::Concat(a, b) => {
                let ca = self.nodes[a.0].value.shape().channels();
                let cb = self.nodes[b.0].value.shape().channels();
                let pixels = dy.len() / (ca + cb);
                let ga = self.take_slot(grads, *a).map(|mut g| {
                    for p in 0..pixels {
                        for k in 0..ca {
                            g[p * ca + k] += dy[p * (ca + cb) + k];
                        }
                    }
                    g
                });
                Self::put_slot(grads, *a, ga);
                let gb = self.take_slot(grads, *b).map(|mut g| {
                    for p in 0..pixels {
                        for k in 0..cb {
                            g[p * cb + k] += dy[p * (ca + cb) + ca + k];
                        }
                    }
                    g
                });
                Self::put_slot(grads, *b, gb);
            }
            Op::Normalize {
                input,
                gain,
                bias,
                kind,
                stats,
            } => {
                let (b, h, w, c) = self.nodes[input.0].value.shape().nhwc().expect("checked");
                let mut gi = self.take_slot(grads, *input);
                let mut gg = self.take_slot(grads, *gain);
                let mut gb = self.take_slot(grads, *bias);
                norm::norm_backward(
                    *kind,
                    (b, h * w, c),
                    val(*input),
                    val(*gain),
                    stats,
                    dy,
                    gi.as_deref_mut(),
                    gg.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                Self::put_slot(grads, *input, gi);
                Self::put_slot(grads, *gain, gg);
                Self::put_slot(grads, *bias, gb);
            }
            Op::Lerp { weight, a, b } => {
                let (wv, av, bv) = (val(*weight), val(*a), val(*b));
                let c = self.nodes[a.0].value.shape().channels();
                let gw = self.take_slot(grads, *weight).map(|mut g| {
                    for (p, gp) in g.iter_mut().enumerate() {
                        let mut acc = T::zero();
                        for k in p * c..(p + 1) * c {
                            acc += dy[k] * (av[k] - bv[k]);
                        }
                        *gp += acc;
                    }
                    g
                });
                Self::put_slot(grads, *weight, gw);
                let ga = self.take_slot(grads, *a).map(|mut g| {
                    for (k, gk) in g.iter_mut().enumerate() {
                        *gk += dy[k] * wv[k / c];
                    }
                    g
                });
                Self::put_slot(grads, *a, ga);
                let gb = self.take_slot(grads, *b).map(|mut g| {
                    for (k, gk) in g.iter_mut().enumerate() {
                        *gk += dy[k] * (T::one() - wv[k / c]);
                    }
                    g
                });
                Self::put_slot(grads, *b, gb);
            }
            Op::SoftmaxXent {
                logits,
                labels,
                mask,
                probs,
                count,
            } => {
                let (_, h, w, c) = self.nodes[logits.0].value.shape().nhwc().expect("checked");
                let g = self.take_slot(grads, *logits).map(|mut g| {
                    softmax::xent_backward(probs, labels, c, h * w, mask, *count, dy[0], &mut g);
                    g
                });
                Self::put_slot(grads, *logits, g);
            }
            Op::Sum(x) => {
                let g = self.take_slot(grads, *x).map(|mut g| {
                    g.iter_mut().for_each(|gv| *gv += dy[0]);
                    g
                });
                Self::put_slot(grads, *x, g);
            }
            Op::WeightedSum(x, wts) => {
                let g = self.take_slot(grads, *x).map(|mut g| {
                    g.iter_mut()
                        .zip(wts)
                        .for_each(|(gv, &wt)| *gv += dy[0] * wt);
                    g
                });
                Self::put_slot(grads, *x, g);
            }
        }
    }

    /// Shape of a node's value.
    pub fn shape(&self, v: Var) -> &Shape {
        self.nodes[v.0].value.shape()
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
