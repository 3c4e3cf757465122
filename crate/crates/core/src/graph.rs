//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only list of nodes. Every operation evaluates
//! eagerly, stores its value, and records what it needs for the backward
//! pass. Inputs always precede the nodes that consume them, so a single
//! reverse sweep over the list visits nodes in a valid topological order.
//!
//! ```
//! use cdma_core::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.param(Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap());
//! let y = g.mul(x, x).unwrap();
//! let loss = g.sum(y);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{ensure, Error, Result};
use crate::tensor::kernels::{self, ConvGeometry};
use crate::tensor::{Float, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
}

/// Deliberate backward corruption used to prove the self-check catches it.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    ConvBackward,
}

enum Op<T> {
    Leaf,
    Detach,
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeometry },
    MaxPool { x: Var, argmax: Vec<usize> },
    SpatialPool { x: Var, argmax: Option<Vec<usize>> },
    ChannelPool { x: Var, argmax: Option<Vec<usize>> },
    Concat { a: Var, b: Var },
    Upsample { x: Var, factor: usize },
    Linear { x: Var, w: Var, b: Var },
    Sigmoid { x: Var },
    Relu { x: Var },
    Softmax { x: Var },
    MulConst { x: Var, factor: Vec<T> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    MulBroadcast { x: Var, gate: Var },
    Scale { x: Var, s: T },
    AddScalar { x: Var },
    LogClamped { x: Var, eps: T },
    Sum { x: Var },
    Reshape { x: Var },
    SliceChannels { x: Var, start: usize },
    SliceBatch { x: Var, start: usize },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Detach => "detach",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool { .. } => "max_pool2d",
            Op::SpatialPool { .. } => "spatial_pool",
            Op::ChannelPool { .. } => "channel_pool",
            Op::Concat { .. } => "concat_channels",
            Op::Upsample { .. } => "upsample_nearest",
            Op::Linear { .. } => "linear",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Relu { .. } => "relu",
            Op::Softmax { .. } => "softmax_channel",
            Op::MulConst { .. } => "mul_const",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Div { .. } => "div",
            Op::MulBroadcast { .. } => "mul_broadcast",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::LogClamped { .. } => "log_clamped",
            Op::Sum { .. } => "sum",
            Op::Reshape { .. } => "reshape",
            Op::SliceChannels { .. } => "slice_channels",
            Op::SliceBatch { .. } => "slice_batch",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation record for one forward/backward pass. Not shared across
/// threads while in use; independent graphs may run concurrently.
pub struct Graph<T: Float = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    fault: Option<Fault>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            fault: None,
        }
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of recorded nodes per operation name.
    pub fn op_counts(&self) -> BTreeMap<&'static str, usize> {
        let mut counts = BTreeMap::new();
        for n in &self.nodes {
            *counts.entry(n.op.name()).or_insert(0) += 1;
        }
        counts
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` loss with respect to `v`, if any
    /// gradient reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Same value, cut from the backward pass.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::Detach, false)
    }

    // ----------------------------------------------------------------------
    // Convolution, pooling, resampling

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, padding: usize, stride: usize) -> Result<Var> {
        let [batch, cin, h, wd] = self.value(x).dims4()?;
        let [cout, wcin, kh, kw] = self.value(w).dims4()?;
        ensure!(
            cin == wcin,
            "conv2d: input has {cin} channels but weight expects {wcin}"
        );
        ensure!(kh % 2 == 1 && kw % 2 == 1, "conv2d: kernel {kh}x{kw} must be odd");
        ensure!(stride >= 1, "conv2d: stride must be at least 1");
        ensure!(
            self.shape(b) == [cout],
            "conv2d: bias shape {:?} does not match {cout} output channels",
            self.shape(b)
        );
        ensure!(
            h + 2 * padding >= kh && wd + 2 * padding >= kw,
            "conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}"
        );
        let geom = ConvGeometry {
            batch,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            pad: padding,
            stride,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (wd + 2 * padding - kw) / stride + 1,
        };
        let mut out = vec![T::zero(); batch * cout * geom.ho * geom.wo];
        kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &mut out,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let value = Tensor::from_parts(vec![batch, cout, geom.ho, geom.wo], out);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, rg))
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let dims @ [b, c, h, w] = self.value(x).dims4()?;
        ensure!(k >= 1 && stride >= 1, "max_pool2d: window and stride must be positive");
        ensure!(k <= h && k <= w, "max_pool2d: window {k} exceeds input {h}x{w}");
        if k == stride {
            ensure!(
                h % stride == 0 && w % stride == 0,
                "max_pool2d: input {h}x{w} not divisible by stride {stride}"
            );
        }
        let (ho, wo) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let mut out = vec![T::zero(); b * c * ho * wo];
        let argmax = kernels::max_pool_forward(self.value(x).data(), dims, k, stride, &mut out);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![b, c, ho, wo], out),
            Op::MaxPool { x, argmax },
            rg,
        ))
    }

    /// Per-channel reduction over all spatial positions: `[B,C,H,W] → [B,C,1,1]`.
    pub fn spatial_pool(&mut self, x: Var, mode: PoolMode) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4()?;
        let hw = h * w;
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(b * c);
        let mut argmax = Vec::new();
        for (pi, plane) in data.chunks_exact(hw).enumerate() {
            match mode {
                PoolMode::Avg => out.push(plane.iter().copied().sum::<T>() / T::of(hw as f64)),
                PoolMode::Max => {
                    let (i, v) = first_max(plane);
                    out.push(v);
                    argmax.push(pi * hw + i);
                }
            }
        }
        let argmax = (mode == PoolMode::Max).then_some(argmax);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![b, c, 1, 1], out),
            Op::SpatialPool { x, argmax },
            rg,
        ))
    }

    /// Per-pixel reduction across channels: `[B,C,H,W] → [B,1,H,W]`.
    pub fn channel_pool(&mut self, x: Var, mode: PoolMode) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4()?;
        let hw = h * w;
        let data = self.value(x).data();
        let mut out = vec![T::zero(); b * hw];
        let mut argmax = vec![0usize; if mode == PoolMode::Max { b * hw } else { 0 }];
        for bi in 0..b {
            for p in 0..hw {
                let at = |ch: usize| data[(bi * c + ch) * hw + p];
                let o = bi * hw + p;
                match mode {
                    PoolMode::Avg => {
                        out[o] = (0..c).map(at).sum::<T>() / T::of(c as f64);
                    }
                    PoolMode::Max => {
                        let mut best = 0;
                        for ch in 1..c {
                            if at(ch) > at(best) {
                                best = ch;
                            }
                        }
                        out[o] = at(best);
                        argmax[o] = best;
                    }
                }
            }
        }
        let argmax = (mode == PoolMode::Max).then_some(argmax);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![b, 1, h, w], out),
            Op::ChannelPool { x, argmax },
            rg,
        ))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [ba, ca, ha, wa] = self.value(a).dims4()?;
        let [bb, cb, hb, wb] = self.value(b).dims4()?;
        ensure!(
            ba == bb && ha == hb && wa == wb,
            "concat_channels: {:?} and {:?} differ outside the channel axis",
            self.shape(a),
            self.shape(b)
        );
        let (la, lb) = (ca * ha * wa, cb * hb * wb);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ba * (la + lb));
        for i in 0..ba {
            out.extend_from_slice(&da[i * la..(i + 1) * la]);
            out.extend_from_slice(&db[i * lb..(i + 1) * lb]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(vec![ba, ca + cb, ha, wa], out),
            Op::Concat { a, b },
            rg,
        ))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let dims @ [b, c, h, w] = self.value(x).dims4()?;
        ensure!(factor >= 1, "upsample_nearest: factor must be at least 1");
        let out = kernels::upsample_nearest(self.value(x).data(), dims, factor);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![b, c, h * factor, w * factor], out),
            Op::Upsample { x, factor },
            rg,
        ))
    }

    /// Affine map `x·Wᵀ + b` for `x: [B, Din]`, `W: [Dout, Din]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (batch, din) = match self.shape(x) {
            &[batch, din] => (batch, din),
            s => return Err(Error::precondition(format!("linear: input must be 2-D, got {s:?}"))),
        };
        let (dout, wdin) = match self.shape(w) {
            &[dout, wdin] => (dout, wdin),
            s => return Err(Error::precondition(format!("linear: weight must be 2-D, got {s:?}"))),
        };
        ensure!(din == wdin, "linear: input width {din} but weight expects {wdin}");
        ensure!(
            self.shape(b) == [dout],
            "linear: bias shape {:?} does not match {dout} outputs",
            self.shape(b)
        );
        let mut out = Vec::with_capacity(batch * dout);
        for _ in 0..batch {
            out.extend_from_slice(self.value(b).data());
        }
        T::gemm(
            batch,
            din,
            dout,
            self.value(x).data(),
            (din, 1),
            self.value(w).data(),
            (1, din),
            T::one(),
            &mut out,
            (dout, 1),
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![batch, dout], out), Op::Linear { x, w, b }, rg))
    }

    // ----------------------------------------------------------------------
    // Activations

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        });
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid { x }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.rg(x);
        self.push(value, Op::Relu { x }, rg)
    }

    /// Softmax over axis 1 (channels), independently at every other index.
    /// The per-position maximum is subtracted before exponentiation.
    pub fn softmax_channel(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        ensure!(shape.len() >= 2, "softmax_channel: need at least 2 axes, got {shape:?}");
        let (b, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for bi in 0..b {
            let base = bi * c * inner;
            for p in 0..inner {
                let idx = |ch: usize| base + ch * inner + p;
                let mut m = src[idx(0)];
                for ch in 1..c {
                    m = m.max(src[idx(ch)]);
                }
                let mut z = T::zero();
                for ch in 0..c {
                    let e = (src[idx(ch)] - m).exp();
                    out[idx(ch)] = e;
                    z += e;
                }
                for ch in 0..c {
                    out[idx(ch)] /= z;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x }, rg))
    }

    // ----------------------------------------------------------------------
    // Perturbations

    /// Inverted dropout. Identity when `rate == 0` or outside training.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R, training: bool) -> Result<Var> {
        ensure!((0.0..1.0).contains(&rate), "dropout: rate {rate} outside [0, 1)");
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let factor: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        Ok(self.mul_const(x, factor))
    }

    /// Multiplicative uniform noise `x + x ⊙ U(-a, a)`. Identity when
    /// `amplitude == 0` or outside training.
    pub fn feature_noise<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        amplitude: f64,
        rng: &mut R,
        training: bool,
    ) -> Result<Var> {
        ensure!(
            amplitude >= 0.0 && amplitude.is_finite(),
            "feature_noise: amplitude {amplitude} must be finite and non-negative"
        );
        if !training || amplitude == 0.0 {
            return Ok(x);
        }
        let factor: Vec<T> = (0..self.value(x).len())
            .map(|_| T::of(1.0 + rng.random_range(-amplitude..amplitude)))
            .collect();
        Ok(self.mul_const(x, factor))
    }

    fn mul_const(&mut self, x: Var, factor: Vec<T>) -> Var {
        let src = self.value(x);
        let data = src.data().iter().zip(&factor).map(|(&v, &f)| v * f).collect();
        let value = Tensor::from_parts(src.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(value, Op::MulConst { x, factor }, rg)
    }

    // ----------------------------------------------------------------------
    // Elementwise arithmetic and reductions

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        ensure!(
            self.shape(a) == self.shape(b),
            "{op}: shapes {:?} and {:?} differ",
            self.shape(a),
            self.shape(b)
        );
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.zip(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.zip(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.zip(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        let value = self.zip(a, b, |x, y| x / y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Div { a, b }, rg))
    }

    /// `x ⊙ gate` where every axis of `gate` either matches `x` or is 1.
    pub fn mul_broadcast(&mut self, x: Var, gate: Var) -> Result<Var> {
        let xs = self.value(x).dims4()?;
        let gs = self.value(gate).dims4()?;
        ensure!(
            xs.iter().zip(&gs).all(|(&a, &b)| b == a || b == 1),
            "mul_broadcast: gate {gs:?} does not broadcast to {xs:?}"
        );
        let (xd, gd) = (self.value(x).data(), self.value(gate).data());
        let mut out = Vec::with_capacity(xd.len());
        for_each_broadcast(xs, gs, |xi, gi| out.push(xd[xi] * gd[gi]));
        let rg = self.rg(x) || self.rg(gate);
        Ok(self.push(
            Tensor::from_parts(xs.to_vec(), out),
            Op::MulBroadcast { x, gate },
            rg,
        ))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(value, Op::Scale { x, s }, rg)
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v + s);
        let rg = self.rg(x);
        self.push(value, Op::AddScalar { x }, rg)
    }

    /// `ln(max(x, eps))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, x: Var, eps: T) -> Var {
        let value = self.value(x).map(|v| v.max(eps).ln());
        let rg = self.rg(x);
        self.push(value, Op::LogClamped { x, eps }, rg)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, T::of(1.0 / n as f64))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4()?;
        ensure!(
            len > 0 && start + len <= c,
            "slice_channels: [{start}, {}) outside {c} channels",
            start + len
        );
        let hw = h * w;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(b * len * hw);
        for bi in 0..b {
            let from = (bi * c + start) * hw;
            out.extend_from_slice(&src[from..from + len * hw]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![b, len, h, w], out),
            Op::SliceChannels { x, start },
            rg,
        ))
    }

    pub fn slice_batch(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).slice_outer(start, len)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SliceBatch { x, start }, rg))
    }

    // ----------------------------------------------------------------------
    // Backward

    /// Reverse sweep from a scalar `loss`. Gradients from any previous call
    /// are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        ensure!(
            self.value(loss).len() == 1,
            "backward: loss must be a scalar, got shape {:?}",
            self.shape(loss)
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), T::one()));
        }
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let dy = gy.data();
        let out = node.value.data();
        let mut acc = |v: Var, g: Tensor<T>| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        let like = |v: Var, data: Vec<T>| Tensor::from_parts(self.shape(v).to_vec(), data);
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::Conv2d { x, w, b, geom } => {
                let (x, w, b) = (*x, *w, *b);
                let mut dx = self.rg(x).then(|| vec![T::zero(); self.value(x).len()]);
                let mut dw = self.rg(w).then(|| vec![T::zero(); self.value(w).len()]);
                let mut db = self.rg(b).then(|| vec![T::zero(); self.value(b).len()]);
                kernels::conv2d_backward(
                    geom,
                    self.value(x).data(),
                    self.value(w).data(),
                    dy,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if self.fault == Some(Fault::ConvBackward) {
                    for g in dx.iter_mut().chain(dw.iter_mut()) {
                        g.iter_mut().for_each(|v| *v *= T::of(1.01));
                    }
                }
                if let Some(dx) = dx {
                    acc(x, like(x, dx));
                }
                if let Some(dw) = dw {
                    acc(w, like(w, dw));
                }
                if let Some(db) = db {
                    acc(b, like(b, db));
                }
            }
            Op::MaxPool { x, argmax } | Op::SpatialPool { x, argmax: Some(argmax) } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (&src, &g) in argmax.iter().zip(dy) {
                    dx[src] += g;
                }
                acc(*x, like(*x, dx));
            }
            Op::SpatialPool { x, argmax: None } => {
                let n = self.value(*x).len();
                let hw = n / dy.len();
                let inv = T::of(1.0 / hw as f64);
                let dx = (0..n).map(|j| dy[j / hw] * inv).collect();
                acc(*x, like(*x, dx));
            }
            Op::ChannelPool { x, argmax } => {
                let [b, c, h, w] = self.value(*x).dims4().expect("4-D");
                let hw = h * w;
                let mut dx = vec![T::zero(); b * c * hw];
                let inv = T::of(1.0 / c as f64);
                for bi in 0..b {
                    for p in 0..hw {
                        let g = dy[bi * hw + p];
                        match argmax {
                            Some(am) => dx[(bi * c + am[bi * hw + p]) * hw + p] += g,
                            None => (0..c).for_each(|ch| dx[(bi * c + ch) * hw + p] += g * inv),
                        }
                    }
                }
                acc(*x, like(*x, dx));
            }
            Op::Concat { a, b } => {
                let [bs, ca, h, w] = self.value(*a).dims4().expect("4-D");
                let cb = self.shape(*b)[1];
                let (la, lb) = (ca * h * w, cb * h * w);
                let mut da = Vec::with_capacity(bs * la);
                let mut db = Vec::with_capacity(bs * lb);
                for i in 0..bs {
                    let row = &dy[i * (la + lb)..(i + 1) * (la + lb)];
                    da.extend_from_slice(&row[..la]);
                    db.extend_from_slice(&row[la..]);
                }
                acc(*a, like(*a, da));
                acc(*b, like(*b, db));
            }
            Op::Upsample { x, factor } => {
                let dims = self.value(*x).dims4().expect("4-D");
                let mut dx = vec![T::zero(); self.value(*x).len()];
                kernels::upsample_nearest_backward(dy, dims, *factor, &mut dx);
                acc(*x, like(*x, dx));
            }
            Op::Linear { x, w, b } => {
                let (batch, din) = (self.shape(*x)[0], self.shape(*x)[1]);
                let dout = self.shape(*w)[0];
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); batch * din];
                    T::gemm(batch, dout, din, dy, (dout, 1), self.value(*w).data(), (din, 1), T::zero(), &mut dx, (din, 1));
                    acc(*x, like(*x, dx));
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); dout * din];
                    T::gemm(dout, batch, din, dy, (1, dout), self.value(*x).data(), (din, 1), T::zero(), &mut dw, (din, 1));
                    acc(*w, like(*w, dw));
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); dout];
                    for row in dy.chunks_exact(dout) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    acc(*b, like(*b, db));
                }
            }
            Op::Sigmoid { x } => {
                let dx = dy.iter().zip(out).map(|(&g, &y)| g * y * (T::one() - y)).collect();
                acc(*x, like(*x, dx));
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let dx = dy
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                acc(*x, like(*x, dx));
            }
            Op::Softmax { x } => {
                let shape = self.shape(*x);
                let (b, c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let mut dx = vec![T::zero(); out.len()];
                for bi in 0..b {
                    let base = bi * c * inner;
                    for p in 0..inner {
                        let idx = |ch: usize| base + ch * inner + p;
                        let dot: T = (0..c).map(|ch| dy[idx(ch)] * out[idx(ch)]).sum();
                        for ch in 0..c {
                            dx[idx(ch)] = out[idx(ch)] * (dy[idx(ch)] - dot);
                        }
                    }
                }
                acc(*x, like(*x, dx));
            }
            Op::MulConst { x, factor } => {
                let dx = dy.iter().zip(factor).map(|(&g, &f)| g * f).collect();
                acc(*x, like(*x, dx));
            }
            Op::Add { a, b } => {
                acc(*a, gy.clone());
                acc(*b, gy.clone());
            }
            Op::Sub { a, b } => {
                acc(*a, gy.clone());
                acc(*b, gy.map(|g| -g));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    acc(*a, like(*a, dy.iter().zip(bv).map(|(&g, &y)| g * y).collect()));
                }
                if self.rg(*b) {
                    acc(*b, like(*b, dy.iter().zip(av).map(|(&g, &x)| g * x).collect()));
                }
            }
            Op::Div { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    acc(*a, like(*a, dy.iter().zip(bv).map(|(&g, &y)| g / y).collect()));
                }
                if self.rg(*b) {
                    let db = dy
                        .iter()
                        .zip(av.iter().zip(bv))
                        .map(|(&g, (&x, &y))| -g * x / (y * y))
                        .collect();
                    acc(*b, like(*b, db));
                }
            }
            Op::MulBroadcast { x, gate } => {
                let xs = self.value(*x).dims4().expect("4-D");
                let gs = self.value(*gate).dims4().expect("4-D");
                let (xd, gd) = (self.value(*x).data(), self.value(*gate).data());
                if self.rg(*x) {
                    let mut dx = Vec::with_capacity(xd.len());
                    let mut k = 0;
                    for_each_broadcast(xs, gs, |_, gi| {
                        dx.push(dy[k] * gd[gi]);
                        k += 1;
                    });
                    acc(*x, like(*x, dx));
                }
                if self.rg(*gate) {
                    let mut dg = vec![T::zero(); gd.len()];
                    for_each_broadcast(xs, gs, |xi, gi| dg[gi] += dy[xi] * xd[xi]);
                    acc(*gate, like(*gate, dg));
                }
            }
            Op::Scale { x, s } => acc(*x, gy.map(|g| g * *s)),
            Op::AddScalar { x } | Op::Reshape { x } => acc(*x, like(*x, dy.to_vec())),
            Op::LogClamped { x, eps } => {
                let xv = self.value(*x).data();
                let dx = dy
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| if v > *eps { g / v } else { T::zero() })
                    .collect();
                acc(*x, like(*x, dx));
            }
            Op::Sum { x } => {
                let n = self.value(*x).len();
                acc(*x, like(*x, vec![dy[0]; n]));
            }
            Op::SliceChannels { x, start } => {
                let [b, c, h, w] = self.value(*x).dims4().expect("4-D");
                let len = node.value.shape()[1];
                let hw = h * w;
                let mut dx = vec![T::zero(); b * c * hw];
                for bi in 0..b {
                    let to = (bi * c + start) * hw;
                    dx[to..to + len * hw].copy_from_slice(&dy[bi * len * hw..(bi + 1) * len * hw]);
                }
                acc(*x, like(*x, dx));
            }
            Op::SliceBatch { x, start } => {
                let inner: usize = self.shape(*x)[1..].iter().product();
                let mut dx = vec![T::zero(); self.value(*x).len()];
                dx[start * inner..start * inner + dy.len()].copy_from_slice(dy);
                acc(*x, like(*x, dx));
            }
        }
    }
}

fn first_max<T: Float>(values: &[T]) -> (usize, T) {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    (best, values[best])
}

/// Visits every element of a `full`-shaped tensor in row-major order along
/// with the matching index into a broadcast `gate`.
fn for_each_broadcast(full: [usize; 4], gate: [usize; 4], mut f: impl FnMut(usize, usize)) {
    let mut gstride = [0usize; 4];
    let mut acc = 1;
    for ax in (0..4).rev() {
        gstride[ax] = if gate[ax] == 1 { 0 } else { acc };
        acc *= gate[ax];
    }
    let mut xi = 0;
    for b in 0..full[0] {
        for c in 0..full[1] {
            for h in 0..full[2] {
                let row = b * gstride[0] + c * gstride[1] + h * gstride[2];
                for w in 0..full[3] {
                    f(xi, row + w * gstride[3]);
                    xi += 1;
                }
            }
        }
    }
}
