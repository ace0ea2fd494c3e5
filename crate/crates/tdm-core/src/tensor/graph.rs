//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only list of nodes. Creation order is a valid
//! topological order, so the backward pass is a single reverse sweep. Every
//! node keeps its forward value; nodes whose inputs are all constants are
//! marked as not requiring grad and are skipped during backward.

use std::str::FromStr;

use super::kernels::{self, ConvGeom};
use super::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate backward-pass corruption, used to prove that the gradient
/// checker catches broken derivatives.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardFault {
    TanhDerivative,
}

/// Per-channel batch statistics from a training-mode batch norm.
/// `var` is the unbiased estimate, ready for a running-average update.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    SquaredDifference(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Matmul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    ScaleChannels {
        x: Var,
        w: Var,
    },
    Conv2d {
        x: Var,
        k: Var,
        geom: ConvGeom,
    },
    Pad2d {
        x: Var,
        pad: usize,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm(Box<BatchNormSaved>),
    /// `pick` holds each window's winning offset: 0..4 in row-major order.
    BatchNormMaxPool2 {
        saved: Box<BatchNormSaved>,
        width: usize,
        pick: Vec<u8>,
    },
    Sum(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    ArgReduce {
        x: Var,
        arg: Vec<usize>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Reshape(Var),
    Expand {
        x: Var,
        axis: usize,
    },
    SelectRows {
        x: Var,
        indices: Vec<usize>,
    },
    Concat(Vec<Var>),
    Pick {
        x: Var,
        indices: Vec<usize>,
    },
}

#[derive(Debug)]
struct BatchNormSaved {
    x: Var,
    scale: Var,
    shift: Var,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    channels: usize,
    inner: usize,
    batch_stats: bool,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation kinds addressable by name through [`Graph::apply`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Matmul,
    Conv2dValid,
    MaxPool2,
    Relu,
    Tanh,
    BatchNorm1d,
    MeanOverAxis,
    MaxOverAxis,
    Sum,
    SoftmaxOverAxis,
    SquaredDifference,
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "add" => OpKind::Add,
            "sub" => OpKind::Sub,
            "mul" => OpKind::Mul,
            "matmul" => OpKind::Matmul,
            "conv2d_valid" => OpKind::Conv2dValid,
            "maxpool2" => OpKind::MaxPool2,
            "relu" => OpKind::Relu,
            "tanh" => OpKind::Tanh,
            "batchnorm1d" => OpKind::BatchNorm1d,
            "mean_over_axis" => OpKind::MeanOverAxis,
            "max_over_axis" => OpKind::MaxOverAxis,
            "sum" => OpKind::Sum,
            "softmax_over_axis" => OpKind::SoftmaxOverAxis,
            "squared_difference" => OpKind::SquaredDifference,
            other => return Err(Error::UnsupportedKind(other.to_string())),
        })
    }
}

/// Attributes for [`Graph::apply`]. Unused fields are ignored by kinds that
/// do not need them.
#[derive(Clone, Debug)]
pub struct OpAttrs {
    pub axis: usize,
    pub train: bool,
    pub eps: f64,
    pub running_mean: Option<Vec<f64>>,
    pub running_var: Option<Vec<f64>>,
}

impl Default for OpAttrs {
    fn default() -> Self {
        OpAttrs {
            axis: 0,
            train: true,
            eps: 1e-5,
            running_mean: None,
            running_var: None,
        }
    }
}

/// Gradients of a scalar output with respect to the graph's leaves.
#[derive(Debug)]
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf that requires grad. Leaves the output does not
    /// depend on get an all-zero gradient.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.by_node.get(var.0).and_then(Option::as_ref)
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<BackwardFault>,
}

/// (outer, len, inner) decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out: Vec<usize> = shape[..axis].iter().chain(&shape[axis + 1..]).copied().collect();
    if out.is_empty() {
        out.push(1);
    }
    out
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(contribution).for_each(|(a, c)| *a += c),
        None => *slot = Some(contribution),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn set_fault(&mut self, fault: Option<BackwardFault>) {
        self.fault = fault;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adds a leaf that takes part in differentiation.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Adds a constant leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn check_axis(&self, x: Var, axis: usize, what: &str) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::shape(format!(
                "{what}: axis {axis} out of range for shape {:?}",
                self.shape(x)
            )));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", Op::Div(a, b), |x, y| x / y)
    }

    /// Elementwise `(a - b)²`.
    pub fn squared_difference(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "squared_difference", Op::SquaredDifference(a, b), |x, y| {
            let d = x - y;
            d * d
        })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), f64::ln)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sqrt(x), f64::sqrt)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp { x, lo, hi }, |v| v.clamp(lo, hi))
    }

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, false);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Matmul(a, b), rg))
    }

    /// Adds a per-channel shift `bias` (length C) along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = *self.shape(x).last().expect("rank >= 1");
        if self.shape(bias) != [c] {
            return Err(Error::shape(format!(
                "add_bias: bias {:?} for input {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let b = self.data(bias);
        let data = self
            .data(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(v, s)| v + s))
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(value, Op::AddBias { x, bias }, rg))
    }

    /// Per-channel scaling: `w`'s shape must be a leading prefix of `x`'s
    /// shape, and each entry of `w` scales the trailing block it indexes.
    pub fn scale_channels(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sw.len() >= sx.len() || sx[..sw.len()] != *sw {
            return Err(Error::shape(format!("scale_channels: weights {sw:?} for input {sx:?}")));
        }
        let inner = numel(&sx[sw.len()..]);
        let wd = self.data(w);
        let data = self
            .data(x)
            .chunks(inner)
            .zip(wd)
            .flat_map(|(blk, &s)| blk.iter().map(move |v| s * v))
            .collect();
        let value = Tensor::new(sx.to_vec(), data)?;
        let rg = self.any_grad(&[x, w]);
        Ok(self.push(value, Op::ScaleChannels { x, w }, rg))
    }

    /// Valid cross-correlation: NCHW input, OIHW kernel, stride 1.
    pub fn conv2d_valid(&mut self, x: Var, k: Var) -> Result<Var> {
        self.conv2d(x, k, 0)
    }

    /// Stride-1 cross-correlation over the input with `pad` zeros on every
    /// side; equal to `conv2d_valid(pad2d(x, pad), k)` without materializing
    /// the padded tensor.
    pub fn conv2d(&mut self, x: Var, k: Var, pad: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x), self.shape(k));
        if sx.len() != 4 || sk.len() != 4 || sx[1] != sk[1] || sk[2] > sx[2] + 2 * pad || sk[3] > sx[3] + 2 * pad {
            return Err(Error::shape(format!("conv2d: input {sx:?}, kernel {sk:?}, pad {pad}")));
        }
        let geom = ConvGeom {
            batch: sx[0],
            in_ch: sx[1],
            h: sx[2],
            w: sx[3],
            out_ch: sk[0],
            kh: sk[2],
            kw: sk[3],
            pad,
        };
        let out = kernels::conv2d_forward(&geom, self.data(x), self.data(k));
        let shape = vec![geom.batch, geom.out_ch, geom.out_h(), geom.out_w()];
        let rg = self.any_grad(&[x, k]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv2d { x, k, geom }, rg))
    }

    /// Zero padding of `pad` pixels on every side of an NCHW tensor.
    pub fn pad2d(&mut self, x: Var, pad: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape(format!("pad2d expects NCHW, got {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let planes = s[0] * s[1];
        let src = self.data(x);
        let mut out = vec![0.0; planes * ph * pw];
        for p in 0..planes {
            for y in 0..h {
                let d = p * ph * pw + (y + pad) * pw + pad;
                out[d..d + w].copy_from_slice(&src[p * h * w + y * w..][..w]);
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(vec![s[0], s[1], ph, pw], out)?, Op::Pad2d { x, pad }, rg))
    }

    /// 2×2 stride-2 max pooling over NCHW; spatial dims must be even.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(Error::shape(format!("maxpool2 expects NCHW with even H, W; got {s:?}")));
        }
        let (out, argmax) = kernels::maxpool2_forward(s[0] * s[1], s[2], s[3], self.data(x));
        let rg = self.any_grad(&[x]);
        let shape = vec![s[0], s[1], s[2] / 2, s[3] / 2];
        Ok(self.push(Tensor::new(shape, out)?, Op::MaxPool2 { x, argmax }, rg))
    }

    /// Batch normalization over axis 1 of a `[B, C, ...]` input with
    /// per-channel `scale` and `shift`.
    ///
    /// In training mode the batch statistics normalize the input and are
    /// returned for the caller's running-average update. Evaluation mode, or
    /// a batch with a single element per channel, uses the running
    /// statistics instead and returns `None`.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        running_mean: &[f64],
        running_var: &[f64],
        train: bool,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (saved, stats) = self.batch_norm_prepare(x, scale, shift, running_mean, running_var, train, eps)?;
        let xd = self.data(x);
        let (g, bsh) = (self.data(scale), self.data(shift));
        let mut out = Vec::with_capacity(xd.len());
        for (p, plane) in xd.chunks(saved.inner).enumerate() {
            let c = p % saved.channels;
            let (gc, m, is, sh) = (g[c], saved.mean[c], saved.inv_std[c], bsh[c]);
            out.extend(plane.iter().map(|x| gc * ((x - m) * is) + sh));
        }
        let rg = self.any_grad(&[x, scale, shift]);
        let shape = self.shape(x).to_vec();
        let v = self.push(Tensor::new(shape, out)?, Op::BatchNorm(Box::new(saved)), rg);
        Ok((v, stats))
    }

    /// `maxpool2(batch_norm(x))` over an NCHW input without materializing the
    /// normalized tensor. Values, statistics and tie-breaking match the two
    /// separate ops.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm_maxpool2(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        running_mean: &[f64],
        running_var: &[f64],
        train: bool,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(Error::shape(format!(
                "batch_norm_maxpool2 expects NCHW with even H, W; got {s:?}"
            )));
        }
        let (saved, stats) = self.batch_norm_prepare(x, scale, shift, running_mean, running_var, train, eps)?;
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.data(x);
        let (g, bsh) = (self.data(scale), self.data(shift));
        let mut out = Vec::with_capacity(xd.len() / 4);
        let mut pick = Vec::with_capacity(xd.len() / 4);
        for (p, plane) in xd.chunks(h * w).enumerate() {
            let c = p % saved.channels;
            let (gc, m, is, sh) = (g[c], saved.mean[c], saved.inv_std[c], bsh[c]);
            let norm = |x: f64| gc * ((x - m) * is) + sh;
            for oy in 0..oh {
                let (r0, r1) = (&plane[2 * oy * w..][..w], &plane[(2 * oy + 1) * w..][..w]);
                for ox in 0..ow {
                    let j = 2 * ox;
                    let (mut best, mut at) = (norm(r0[j]), 0u8);
                    for (v, k) in [(r0[j + 1], 1u8), (r1[j], 2), (r1[j + 1], 3)] {
                        let v = norm(v);
                        if v > best {
                            best = v;
                            at = k;
                        }
                    }
                    out.push(best);
                    pick.push(at);
                }
            }
        }
        let rg = self.any_grad(&[x, scale, shift]);
        let op = Op::BatchNormMaxPool2 {
            saved: Box::new(saved),
            width: w,
            pick,
        };
        let v = self.push(Tensor::new(vec![s[0], s[1], oh, ow], out)?, op, rg);
        Ok((v, stats))
    }

    /// Validates batch-norm operands and computes the normalizing mean and
    /// inverse standard deviation.
    #[allow(clippy::too_many_arguments)]
    fn batch_norm_prepare(
        &self,
        x: Var,
        scale: Var,
        shift: Var,
        running_mean: &[f64],
        running_var: &[f64],
        train: bool,
        eps: f64,
    ) -> Result<(BatchNormSaved, Option<BatchStats>)> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(Error::shape(format!("batch_norm expects [B, C, ...], got {s:?}")));
        }
        let (batch, channels) = (s[0], s[1]);
        let inner = numel(&s[2..]);
        for (name, v) in [
            ("scale", self.shape(scale).to_vec()),
            ("shift", self.shape(shift).to_vec()),
            ("running_mean", vec![running_mean.len()]),
            ("running_var", vec![running_var.len()]),
        ] {
            if v != [channels] {
                return Err(Error::shape(format!(
                    "batch_norm {name} has shape {v:?}, expected [{channels}]"
                )));
            }
        }
        let count = batch * inner;
        let use_batch = train && count > 1;
        let xd = self.data(x);
        let plane = |b: usize, c: usize| (b * channels + c) * inner..(b * channels + c + 1) * inner;

        let mut mean = vec![0.0; channels];
        let mut var = vec![0.0; channels];
        let mut stats = None;
        if use_batch {
            for b in 0..batch {
                for (c, m) in mean.iter_mut().enumerate() {
                    *m += kernels::lane_sum(&xd[plane(b, c)], |x| x);
                }
            }
            mean.iter_mut().for_each(|m| *m /= count as f64);
            for b in 0..batch {
                for (c, v) in var.iter_mut().enumerate() {
                    let m = mean[c];
                    *v += kernels::lane_sum(&xd[plane(b, c)], |x| (x - m) * (x - m));
                }
            }
            var.iter_mut().for_each(|v| *v /= count as f64);
            stats = Some(BatchStats {
                mean: mean.clone(),
                var: var.iter().map(|v| v * count as f64 / (count - 1) as f64).collect(),
            });
        } else {
            mean.copy_from_slice(running_mean);
            var.copy_from_slice(running_var);
        }
        let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let saved = BatchNormSaved {
            x,
            scale,
            shift,
            mean,
            inv_std,
            channels,
            inner,
            batch_stats: use_batch,
        };
        Ok((saved, stats))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.data(x).iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    fn reduce_axis(&self, x: Var, axis: usize, f: impl Fn(&mut dyn Iterator<Item = f64>) -> f64) -> Tensor {
        let shape = self.shape(x);
        let (outer, len, inner) = split_axis(shape, axis);
        let d = self.data(x);
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut it = (0..len).map(|k| d[(o * len + k) * inner + i]);
                out.push(f(&mut it));
            }
        }
        Tensor::new(reduced_shape(shape, axis), out).expect("reduced shape")
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "sum_axis")?;
        let t = self.reduce_axis(x, axis, |it: &mut dyn Iterator<Item = f64>| it.sum());
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::SumAxis { x, axis }, rg))
    }

    /// Mean along `axis`, computed as the sequential sum divided by the
    /// axis length.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "mean_axis")?;
        let len = self.shape(x)[axis] as f64;
        let t = self.reduce_axis(x, axis, |it: &mut dyn Iterator<Item = f64>| it.sum::<f64>() / len);
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::MeanAxis { x, axis }, rg))
    }

    fn arg_reduce(&mut self, x: Var, axis: usize, better: fn(f64, f64) -> bool, what: &str) -> Result<Var> {
        self.check_axis(x, axis, what)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let d = self.data(x);
        let mut out = Vec::with_capacity(outer * inner);
        let mut arg = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best_idx = o * len * inner + i;
                for k in 1..len {
                    let idx = (o * len + k) * inner + i;
                    if better(d[idx], d[best_idx]) {
                        best_idx = idx;
                    }
                }
                out.push(d[best_idx]);
                arg.push(best_idx);
            }
        }
        let rg = self.any_grad(&[x]);
        let t = Tensor::new(reduced_shape(&shape, axis), out)?;
        Ok(self.push(t, Op::ArgReduce { x, arg }, rg))
    }

    /// Maximum along `axis`; the gradient flows to the first maximal entry.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.arg_reduce(x, axis, |a, b| a > b, "max_axis")
    }

    /// Minimum along `axis`; the gradient flows to the first minimal entry.
    pub fn min_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.arg_reduce(x, axis, |a, b| a < b, "min_axis")
    }

    /// Numerically stable softmax along `axis` (max-shifted).
    pub fn softmax_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "softmax_axis")?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let d = self.data(x);
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let m = (0..len).map(|k| d[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..len {
                    let e = (d[at(k)] - m).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[at(k)] /= z;
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), self.data(x).to_vec())?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Inserts a new axis at `axis` holding `size` copies of `x`.
    pub fn expand(&mut self, x: Var, axis: usize, size: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis > s.len() || size == 0 {
            return Err(Error::shape(format!("expand: axis {axis} size {size} on {s:?}")));
        }
        let outer = numel(&s[..axis]);
        let inner = numel(&s[axis..]);
        let d = self.data(x);
        let mut out = Vec::with_capacity(outer * size * inner);
        for o in 0..outer {
            let blk = &d[o * inner..(o + 1) * inner];
            for _ in 0..size {
                out.extend_from_slice(blk);
            }
        }
        let mut shape = s;
        shape.insert(axis, size);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Expand { x, axis }, rg))
    }

    /// Gathers rows (slices along axis 0) in the given order.
    pub fn select_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let row = numel(&s[1..]);
        if indices.is_empty() || indices.iter().any(|&i| i >= s[0]) {
            return Err(Error::shape(format!("select_rows: indices {indices:?} for {s:?}")));
        }
        let d = self.data(x);
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            out.extend_from_slice(&d[i * row..(i + 1) * row]);
        }
        let mut shape = s;
        shape[0] = indices.len();
        let rg = self.any_grad(&[x]);
        let op = Op::SelectRows {
            x,
            indices: indices.to_vec(),
        };
        Ok(self.push(Tensor::new(shape, out)?, op, rg))
    }

    /// Concatenation along axis 0.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &x in xs {
            let s = self.shape(x);
            if s[1..] != tail[..] {
                return Err(Error::shape(format!("concat: {s:?} vs trailing {tail:?}")));
            }
            rows += s[0];
            out.extend_from_slice(self.data(x));
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let rg = self.any_grad(xs);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(xs.to_vec()), rg))
    }

    /// For an R×N input, picks `x[r, indices[r]]` for every row.
    pub fn pick(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || indices.len() != s[0] {
            return Err(Error::shape(format!("pick: {} indices for {s:?}", indices.len())));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= s[1]) {
            return Err(Error::shape(format!("pick: column {bad} out of range for {s:?}")));
        }
        let d = self.data(x);
        let out = indices.iter().enumerate().map(|(r, &c)| d[r * s[1] + c]).collect();
        let rg = self.any_grad(&[x]);
        let op = Op::Pick {
            x,
            indices: indices.to_vec(),
        };
        Ok(self.push(Tensor::new(vec![s[0]], out)?, op, rg))
    }

    /// Name-addressed entry point over the core op kinds. Binary kinds take
    /// two inputs; `batchnorm1d` takes `[x, scale, shift]` and reads running
    /// statistics from `attrs` (defaults 0 and 1).
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var], attrs: &OpAttrs) -> Result<Var> {
        let arity = match kind {
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Matmul | OpKind::Conv2dValid => 2,
            OpKind::SquaredDifference => 2,
            OpKind::BatchNorm1d => 3,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::shape(format!(
                "{kind:?} takes {arity} inputs, got {}",
                inputs.len()
            )));
        }
        let i = inputs;
        match kind {
            OpKind::Add => self.add(i[0], i[1]),
            OpKind::Sub => self.sub(i[0], i[1]),
            OpKind::Mul => self.mul(i[0], i[1]),
            OpKind::Matmul => self.matmul(i[0], i[1]),
            OpKind::Conv2dValid => self.conv2d_valid(i[0], i[1]),
            OpKind::MaxPool2 => self.maxpool2(i[0]),
            OpKind::Relu => Ok(self.relu(i[0])),
            OpKind::Tanh => Ok(self.tanh(i[0])),
            OpKind::BatchNorm1d => {
                if self.shape(i[0]).len() != 2 {
                    return Err(Error::shape(format!(
                        "batchnorm1d expects B x C, got {:?}",
                        self.shape(i[0])
                    )));
                }
                let c = self.shape(i[0])[1];
                let rm = attrs.running_mean.clone().unwrap_or_else(|| vec![0.0; c]);
                let rv = attrs.running_var.clone().unwrap_or_else(|| vec![1.0; c]);
                Ok(self.batch_norm(i[0], i[1], i[2], &rm, &rv, attrs.train, attrs.eps)?.0)
            }
            OpKind::MeanOverAxis => self.mean_axis(i[0], attrs.axis),
            OpKind::MaxOverAxis => self.max_axis(i[0], attrs.axis),
            OpKind::Sum => Ok(self.sum(i[0])),
            OpKind::SoftmaxOverAxis => self.softmax_axis(i[0], attrs.axis),
            OpKind::SquaredDifference => self.squared_difference(i[0], i[1]),
        }
    }

    /// Reverse sweep from a scalar `output`. Every leaf that requires grad
    /// receives a gradient; leaves the output does not depend on get zeros.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_node = &self.nodes[output.0];
        if out_node.value.len() != 1 {
            return Err(Error::NotScalar(out_node.value.shape().to_vec()));
        }
        if !out_node.requires_grad {
            return Err(Error::DisconnectedGraph);
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(output.0 + 1);
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(vec![1.0]);
        let mut result: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        result.resize_with(self.nodes.len(), || None);

        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            if let Op::Leaf = node.op {
                result[id] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            self.propagate(node, g, &mut grads);
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && result[id].is_none() {
                result[id] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { by_node: result })
    }

    fn propagate(&self, node: &Node, g: Vec<f64>, grads: &mut [Option<Vec<f64>>]) {
        let mut send = |v: Var, contribution: Vec<f64>| {
            if self.nodes[v.0].requires_grad {
                accumulate(&mut grads[v.0], contribution);
            }
        };
        let y = node.value.data();
        match &node.op {
            Op::Leaf => unreachable!("leaves are handled by the caller"),
            Op::Add(a, b) => {
                send(*b, g.clone());
                send(*a, g);
            }
            Op::Sub(a, b) => {
                send(*b, g.iter().map(|v| -v).collect());
                send(*a, g);
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                send(*a, g.iter().zip(db).map(|(g, y)| g * y).collect());
                send(*b, g.iter().zip(da).map(|(g, x)| g * x).collect());
            }
            Op::Div(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                send(*a, g.iter().zip(db).map(|(g, y)| g / y).collect());
                send(
                    *b,
                    g.iter().zip(da).zip(db).map(|((g, x), y)| -g * x / (y * y)).collect(),
                );
            }
            Op::SquaredDifference(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                let ga: Vec<f64> = g.iter().zip(da).zip(db).map(|((g, x), y)| 2.0 * g * (x - y)).collect();
                send(*b, ga.iter().map(|v| -v).collect());
                send(*a, ga);
            }
            Op::Scale(x, c) => send(*x, g.iter().map(|v| v * c).collect()),
            Op::AddScalar(x) => send(*x, g),
            Op::Relu(x) => {
                let mut g = g;
                for (gv, &v) in g.iter_mut().zip(self.data(*x)) {
                    if v <= 0.0 {
                        *gv = 0.0;
                    }
                }
                send(*x, g);
            }
            Op::Tanh(x) => {
                let faulty = self.fault == Some(BackwardFault::TanhDerivative);
                send(
                    *x,
                    g.iter()
                        .zip(y)
                        .map(|(g, t)| if faulty { g * (1.0 - t) } else { g * (1.0 - t * t) })
                        .collect(),
                );
            }
            Op::Exp(x) => send(*x, g.iter().zip(y).map(|(g, e)| g * e).collect()),
            Op::Log(x) => {
                let dx = self.data(*x);
                send(*x, g.iter().zip(dx).map(|(g, v)| g / v).collect());
            }
            Op::Sqrt(x) => send(*x, g.iter().zip(y).map(|(g, s)| g * 0.5 / s).collect()),
            Op::Clamp { x, lo, hi } => {
                let dx = self.data(*x);
                send(
                    *x,
                    g.iter()
                        .zip(dx)
                        .map(|(g, v)| if v > lo && v < hi { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, &g, false, self.data(*b), true, &mut da, false);
                    send(*a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, self.data(*a), true, &g, false, &mut db, false);
                    send(*b, db);
                }
            }
            Op::AddBias { x, bias } => {
                let c = self.shape(*bias)[0];
                let mut db = vec![0.0; c];
                for row in g.chunks(c) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                send(*bias, db);
                send(*x, g);
            }
            Op::ScaleChannels { x, w } => {
                let inner = self.value(*x).len() / self.value(*w).len();
                let (dx, dw) = (self.data(*x), self.data(*w));
                if self.nodes[w.0].requires_grad {
                    let gw = g
                        .chunks(inner)
                        .zip(dx.chunks(inner))
                        .map(|(gb, xb)| gb.iter().zip(xb).map(|(a, b)| a * b).sum())
                        .collect();
                    send(*w, gw);
                }
                let gx = g
                    .chunks(inner)
                    .zip(dw)
                    .flat_map(|(gb, &s)| gb.iter().map(move |v| v * s))
                    .collect();
                send(*x, gx);
            }
            Op::Conv2d { x, k, geom } => {
                let need_dx = self.nodes[x.0].requires_grad;
                let (dk, dx) = kernels::conv2d_backward(geom, self.data(*x), self.data(*k), &g, need_dx);
                send(*k, dk);
                if let Some(dx) = dx {
                    send(*x, dx);
                }
            }
            Op::Pad2d { x, pad } => {
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let (ph, pw) = (h + 2 * pad, w + 2 * pad);
                let mut dx = Vec::with_capacity(self.value(*x).len());
                for p in 0..s[0] * s[1] {
                    for yy in 0..h {
                        let st = p * ph * pw + (yy + pad) * pw + pad;
                        dx.extend_from_slice(&g[st..st + w]);
                    }
                }
                send(*x, dx);
            }
            Op::MaxPool2 { x, argmax } | Op::ArgReduce { x, arg: argmax } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (gv, &i) in g.iter().zip(argmax) {
                    dx[i] += gv;
                }
                send(*x, dx);
            }
            Op::BatchNorm(s) => self.batch_norm_backward(s, g, &mut send),
            Op::BatchNormMaxPool2 { saved, width, pick } => {
                self.batch_norm_maxpool2_backward(saved, *width, pick, &g, &mut send)
            }
            Op::Sum(x) => send(*x, vec![g[0]; self.value(*x).len()]),
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                let scale = if matches!(node.op, Op::MeanAxis { .. }) {
                    1.0 / len as f64
                } else {
                    1.0
                };
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            dx[(o * len + k) * inner + i] = g[o * inner + i] * scale;
                        }
                    }
                }
                send(*x, dx);
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                let mut dx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..len {
                            dx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                send(*x, dx);
            }
            Op::Reshape(x) => send(*x, g),
            Op::Expand { x, axis } => {
                let s = node.value.shape();
                let outer = numel(&s[..*axis]);
                let size = s[*axis];
                let inner = numel(&s[axis + 1..]);
                let mut dx = vec![0.0; outer * inner];
                for o in 0..outer {
                    for k in 0..size {
                        let src = &g[(o * size + k) * inner..][..inner];
                        dx[o * inner..(o + 1) * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, v)| *d += v);
                    }
                }
                send(*x, dx);
            }
            Op::SelectRows { x, indices } => {
                let row = numel(&self.shape(*x)[1..]);
                let mut dx = vec![0.0; self.value(*x).len()];
                for (k, &i) in indices.iter().enumerate() {
                    dx[i * row..(i + 1) * row]
                        .iter_mut()
                        .zip(&g[k * row..(k + 1) * row])
                        .for_each(|(d, v)| *d += v);
                }
                send(*x, dx);
            }
            Op::Concat(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let n = self.value(x).len();
                    send(x, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::Pick { x, indices } => {
                let cols = self.shape(*x)[1];
                let mut dx = vec![0.0; self.value(*x).len()];
                for (r, &c) in indices.iter().enumerate() {
                    dx[r * cols + c] += g[r];
                }
                send(*x, dx);
            }
        }
    }

    fn batch_norm_backward(&self, s: &BatchNormSaved, mut g: Vec<f64>, send: &mut impl FnMut(Var, Vec<f64>)) {
        let (channels, inner) = (s.channels, s.inner);
        let batch = g.len() / (channels * inner);
        let count = (batch * inner) as f64;
        let gamma = self.data(s.scale);
        let xd = self.data(s.x);
        let plane = |b: usize, c: usize| (b * channels + c) * inner..(b * channels + c + 1) * inner;
        let xhat = |c: usize, x: f64| (x - s.mean[c]) * s.inv_std[c];
        let mut dscale = vec![0.0; channels];
        let mut dshift = vec![0.0; channels];
        for b in 0..batch {
            for c in 0..channels {
                let r = plane(b, c);
                dscale[c] += kernels::lane_sum2(&g[r.clone()], &xd[r.clone()], |gv, x| gv * xhat(c, x));
                dshift[c] += kernels::lane_sum(&g[r], |gv| gv);
            }
        }
        if self.nodes[s.x.0].requires_grad {
            // dx overwrites g element by element; each element reads only its own g.
            for b in 0..batch {
                for c in 0..channels {
                    let k = gamma[c] * s.inv_std[c];
                    let r = plane(b, c);
                    let it = g[r.clone()].iter_mut().zip(&xd[r]);
                    if s.batch_stats {
                        let (sum_g, sum_gx) = (dshift[c], dscale[c]);
                        for (d, &x) in it {
                            *d = k / count * (count * *d - sum_g - xhat(c, x) * sum_gx);
                        }
                    } else {
                        for (d, _) in it {
                            *d *= k;
                        }
                    }
                }
            }
            send(s.x, g);
        }
        send(s.scale, dscale);
        send(s.shift, dshift);
    }
}

impl Graph {
    /// Backward of the fused op. Only window winners receive upstream
    /// gradient, so the channel sums run over the pooled gradient and `dx`
    /// takes one dense pass for the mean terms before the winners are set.
    fn batch_norm_maxpool2_backward(
        &self,
        s: &BatchNormSaved,
        w: usize,
        pick: &[u8],
        g: &[f64],
        send: &mut impl FnMut(Var, Vec<f64>),
    ) {
        let (channels, inner) = (s.channels, s.inner);
        let planes = self.value(s.x).len() / inner;
        let (oh, ow) = (inner / w / 2, w / 2);
        let pooled = oh * ow;
        let count = (planes / channels * inner) as f64;
        let gamma = self.data(s.scale);
        let xd = self.data(s.x);
        // Winning input index (within its plane) of every pooled position.
        let winners = |p: usize| {
            let picks = &pick[p * pooled..(p + 1) * pooled];
            (0..oh).flat_map(move |oy| {
                (0..ow).map(move |ox| {
                    let k = picks[oy * ow + ox] as usize;
                    (2 * oy + (k >> 1)) * w + 2 * ox + (k & 1)
                })
            })
        };
        let mut dscale = vec![0.0; channels];
        let mut dshift = vec![0.0; channels];
        for p in 0..planes {
            let c = p % channels;
            let (m, is) = (s.mean[c], s.inv_std[c]);
            let gp = &g[p * pooled..(p + 1) * pooled];
            let xp = &xd[p * inner..(p + 1) * inner];
            dshift[c] += kernels::lane_sum(gp, |v| v);
            dscale[c] += gp
                .iter()
                .zip(winners(p))
                .map(|(gv, i)| gv * ((xp[i] - m) * is))
                .sum::<f64>();
        }
        if self.nodes[s.x.0].requires_grad {
            let mut dx = Vec::with_capacity(xd.len());
            for (p, xp) in xd.chunks(inner).enumerate() {
                let c = p % channels;
                let (m, is) = (s.mean[c], s.inv_std[c]);
                let k = gamma[c] * is;
                let gp = &g[p * pooled..(p + 1) * pooled];
                let start = dx.len();
                if s.batch_stats {
                    let (sum_g, sum_gx) = (dshift[c], dscale[c]);
                    let kc = k / count;
                    dx.extend(xp.iter().map(|&x| kc * (-sum_g - (x - m) * is * sum_gx)));
                    let dp = &mut dx[start..];
                    for (&gv, i) in gp.iter().zip(winners(p)) {
                        dp[i] = kc * (count * gv - sum_g - (xp[i] - m) * is * sum_gx);
                    }
                } else {
                    dx.resize(start + inner, 0.0);
                    let dp = &mut dx[start..];
                    for (&gv, i) in gp.iter().zip(winners(p)) {
                        dp[i] = k * gv;
                    }
                }
            }
            send(s.x, dx);
        }
        send(s.scale, dscale);
        send(s.shift, dshift);
    }
}
