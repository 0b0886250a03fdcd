//! Tape-based reverse-mode differentiation.
//!
//! Every forward operation appends a node holding its output value and the
//! inputs it needs for the backward pass. [`Tape::backward`] replays the tape
//! in reverse and returns one gradient buffer per node that requires grad.

use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::params::{ParamId, ParamKind, ParamStore};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{gemm, softmax_rows, Mat, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise activation functions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Abs,
    Tanh,
    Relu,
    LeakyRelu(f64),
    Elu(f64),
}

/// `tanh` through one `exp` of a non-positive argument; several times
/// faster than the libm routine and accurate to a few ulps.
fn tanh<T: Scalar>(x: T) -> T {
    let e = (T::from_f64(-2.0) * x.abs()).exp();
    ((T::one() - e) / (T::one() + e)).copysign(x)
}

impl Activation {
    pub const LEAKY_SLOPE: f64 = 0.2;
    pub const ELU_ALPHA: f64 = 1.0;

    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Abs => x.abs(),
            Activation::Tanh => tanh(x),
            Activation::Relu => x.max(T::zero()),
            Activation::LeakyRelu(s) => {
                if x > T::zero() {
                    x
                } else {
                    x * T::from_f64(s)
                }
            }
            Activation::Elu(a) => {
                if x > T::zero() {
                    x
                } else {
                    T::from_f64(a) * x.exp_m1()
                }
            }
        }
    }

    /// Derivative given input `x` and output `y`; kinks take the value 0
    /// (abs, relu) or the left slope (leaky relu, elu).
    fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Activation::Abs => {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - y * y,
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu(s) => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::from_f64(s)
                }
            }
            Activation::Elu(a) => {
                if x > T::zero() {
                    T::one()
                } else {
                    y + T::from_f64(a)
                }
            }
        }
    }
}

/// Batch-norm behaviour: batch statistics (train) or running statistics (eval).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Statistics of one train-mode batch-norm call, for the running averages.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased (n-1) variance.
    pub var: Vec<T>,
}

pub const BN_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    Param(ParamId),
    Reshape(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Act(Var, Activation),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    AvgPool {
        input: Var,
        window: usize,
        stride: usize,
    },
    GlobalAvgPool(Var),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    MeanAxis1(Var),
    PairScores {
        wh: Var,
        attn: Var,
    },
    MaskedSoftmax(Var),
    BatchMatMul(Var, Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Record of one forward pass.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims4(op: &'static str, t: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *t {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(shape_err(op, format!("expected 4-d input, got {t:?}"))),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
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

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, rg: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op_name));
        }
        self.consumed = false;
        self.nodes.push(Node {
            value,
            op,
            requires_grad: rg,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; no gradient is computed for it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Free leaf whose gradient is reported by [`Gradients::get`].
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Bring a stored parameter onto the tape. Only trainable parameters
    /// receive gradients.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Param(id),
            requires_grad: p.kind == ParamKind::Trainable,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        self.push("reshape", value, Op::Reshape(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("add", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| *x + *y).collect();
        let value = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("add", value, Op::Add(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("mul", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| *x * *y).collect();
        let value = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("mul", value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = T::from_f64(s);
        let vx = self.value(x);
        let value = Tensor::new(vx.shape(), vx.data().iter().map(|v| *v * s).collect())?;
        let rg = self.rg(x);
        self.push("scale", value, Op::Scale(x, s), rg)
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push("sum", Tensor::new(&[1], vec![total])?, Op::Sum(x), rg)
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Result<Var> {
        let vx = self.value(x);
        let data = match act {
            Activation::Abs => vx.data().iter().map(|v| v.abs()).collect(),
            Activation::Tanh => vx.data().iter().map(|v| tanh(*v)).collect(),
            _ => vx.data().iter().map(|v| act.apply(*v)).collect(),
        };
        let value = Tensor::new(vx.shape(), data)?;
        let rg = self.rg(x);
        self.push("activation", value, Op::Act(x, act), rg)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Abs)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.activation(x, Activation::LeakyRelu(slope))
    }

    pub fn elu(&mut self, x: Var, alpha: f64) -> Result<Var> {
        self.activation(x, Activation::Elu(alpha))
    }

    /// 2-d cross-correlation with zero padding.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (n, c, h, w) = dims4("conv2d", self.value(input).shape())?;
        let (f, kc, kh, kw) = dims4("conv2d", self.value(kernel).shape())?;
        if kc != c {
            return Err(shape_err("conv2d", format!("input has {c} channels, kernel expects {kc}")));
        }
        if stride == 0 {
            return Err(shape_err("conv2d", "stride must be positive"));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(shape_err("conv2d", format!("kernel {kh}x{kw} exceeds padded input {h}x{w}")));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [f] {
                return Err(shape_err("conv2d", format!("bias shape {:?}", self.value(b).shape())));
            }
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: w,
            kh,
            kw,
            stride,
            padding,
        };
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            n,
            &geom,
            self.value(kernel).data(),
            f,
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(&[n, f, geom.out_height(), geom.out_width()], out)?;
        let rg = self.rg(input) || self.rg(kernel) || bias.is_some_and(|b| self.rg(b));
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        )
    }

    pub fn avg_pool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let (n, c, h, w) = dims4("avg_pool2d", self.value(input).shape())?;
        if window == 0 || stride == 0 || window > h || window > w {
            return Err(shape_err(
                "avg_pool2d",
                format!("window {window} stride {stride} on {h}x{w} input"),
            ));
        }
        let out = kernels::avg_pool_forward(self.value(input).data(), n * c, h, w, window, stride);
        let shape = [
            n,
            c,
            kernels::avg_pool_out(h, window, stride),
            kernels::avg_pool_out(w, window, stride),
        ];
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(input);
        self.push(
            "avg_pool2d",
            value,
            Op::AvgPool {
                input,
                window,
                stride,
            },
            rg,
        )
    }

    /// `[N,C,H,W] -> [N,C]` mean over spatial positions.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = dims4("global_avg_pool", self.value(input).shape())?;
        let hw = h * w;
        let inv = T::one() / T::from_f64(hw as f64);
        let data = self
            .value(input)
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new(&[n, c], data)?;
        let rg = self.rg(input);
        self.push("global_avg_pool", value, Op::GlobalAvgPool(input), rg)
    }

    /// Batch normalization over `[N,C,H,W]` or `[N,C]` inputs.
    ///
    /// In train mode the batch statistics are returned so the caller can
    /// update its running averages; eval mode normalizes with `running`.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: (&[T], &[T]),
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let shape = self.value(input).shape().to_vec();
        let (n, c, hw) = match shape[..] {
            [n, c] => (n, c, 1),
            [n, c, h, w] => (n, c, h * w),
            _ => return Err(shape_err("batch_norm", format!("unsupported shape {shape:?}"))),
        };
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(shape_err("batch_norm", "gamma/beta must have one entry per channel"));
        }
        if running.0.len() != c || running.1.len() != c {
            return Err(shape_err("batch_norm", "running statistics must have one entry per channel"));
        }
        let train = mode == Mode::Train;
        if train && n < 2 {
            return Err(Error::BatchTooSmall(n));
        }
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let count = n * hw;
        let eps = T::from_f64(BN_EPS);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        if train {
            for s in 0..n {
                for (ch, m) in mean.iter_mut().enumerate() {
                    let off = (s * c + ch) * hw;
                    *m += x[off..off + hw].iter().copied().sum::<T>();
                }
            }
            let inv_count = T::one() / T::from_f64(count as f64);
            for m in &mut mean {
                *m *= inv_count;
            }
            for s in 0..n {
                for ch in 0..c {
                    let off = (s * c + ch) * hw;
                    var[ch] += x[off..off + hw]
                        .iter()
                        .map(|v| (*v - mean[ch]) * (*v - mean[ch]))
                        .sum::<T>();
                }
            }
            for v in &mut var {
                *v *= inv_count;
            }
        } else {
            mean.copy_from_slice(running.0);
            var.copy_from_slice(running.1);
        }
        let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * hw;
                for i in off..off + hw {
                    xhat[i] = (x[i] - mean[ch]) * inv_std[ch];
                    out[i] = xhat[i] * g[ch] + b[ch];
                }
            }
        }
        let stats = train.then(|| {
            let unbias = if count > 1 {
                T::from_f64(count as f64 / (count - 1) as f64)
            } else {
                T::one()
            };
            BatchStats {
                mean: mean.clone(),
                var: var.iter().map(|v| *v * unbias).collect(),
            }
        });
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            "batch_norm",
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        )?;
        Ok((v, stats))
    }

    /// `[N,d_in] x [d_in,d_out] + bias`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.value(input).shape(), self.value(weight).shape());
        let (n, din, dout) = match (xs, ws) {
            ([n, d], [d2, o]) if d == d2 => (*n, *d, *o),
            _ => return Err(shape_err("linear", format!("input {xs:?}, weight {ws:?}"))),
        };
        if let Some(b) = bias {
            if self.value(b).shape() != [dout] {
                return Err(shape_err("linear", format!("bias shape {:?}", self.value(b).shape())));
            }
        }
        let mut out = vec![T::zero(); n * dout];
        if let Some(b) = bias {
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(self.value(b).data());
            }
        }
        gemm(
            Mat::new(self.value(input).data(), n, din),
            Mat::new(self.value(weight).data(), din, dout),
            &mut out,
            bias.is_some(),
        );
        let value = Tensor::new(&[n, dout], out)?;
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        self.push(
            "linear",
            value,
            Op::Linear {
                input,
                weight,
                bias,
            },
            rg,
        )
    }

    /// `[B,N,D] -> [B,D]` mean over the middle axis.
    pub fn mean_axis1(&mut self, input: Var) -> Result<Var> {
        let (b, nn, d) = match self.value(input).shape() {
            [b, n, d] if *n > 0 => (*b, *n, *d),
            s => return Err(shape_err("mean_axis1", format!("expected [B,N>0,D], got {s:?}"))),
        };
        let x = self.value(input).data();
        let inv = T::one() / T::from_f64(nn as f64);
        let mut out = vec![T::zero(); b * d];
        for bi in 0..b {
            let dst = &mut out[bi * d..(bi + 1) * d];
            for row in x[bi * nn * d..(bi + 1) * nn * d].chunks(d) {
                for (o, v) in dst.iter_mut().zip(row) {
                    *o += *v;
                }
            }
            for o in dst.iter_mut() {
                *o *= inv;
            }
        }
        let value = Tensor::new(&[b, d], out)?;
        let rg = self.rg(input);
        self.push("mean_axis1", value, Op::MeanAxis1(input), rg)
    }

    /// Raw attention logits `e[b,i,j] = a_src . wh[b,i] + a_dst . wh[b,j]`
    /// for `wh: [B,N,D]` and `attn: [2D]` laid out as `[a_src | a_dst]`.
    pub fn pair_scores(&mut self, wh: Var, attn: Var) -> Result<Var> {
        let (b, nn, d) = match self.value(wh).shape() {
            [b, n, d] => (*b, *n, *d),
            s => return Err(shape_err("pair_scores", format!("expected [B,N,D], got {s:?}"))),
        };
        if self.value(attn).shape() != [2 * d] {
            return Err(shape_err(
                "pair_scores",
                format!("attention vector {:?} for feature dim {d}", self.value(attn).shape()),
            ));
        }
        let (src, dst) = pair_terms(self.value(wh).data(), self.value(attn).data(), b * nn, d);
        let mut out = vec![T::zero(); b * nn * nn];
        for bi in 0..b {
            for i in 0..nn {
                for j in 0..nn {
                    out[(bi * nn + i) * nn + j] = src[bi * nn + i] + dst[bi * nn + j];
                }
            }
        }
        let value = Tensor::new(&[b, nn, nn], out)?;
        let rg = self.rg(wh) || self.rg(attn);
        self.push("pair_scores", value, Op::PairScores { wh, attn }, rg)
    }

    /// Softmax over the last axis of `[B,N,N]` scores restricted to the
    /// neighbourhood `mask` (`N*N`, row-major, shared across the batch).
    /// Masked entries come out exactly zero.
    pub fn masked_softmax(&mut self, scores: Var, mask: Rc<Vec<bool>>) -> Result<Var> {
        let (b, nn) = match self.value(scores).shape() {
            [b, n, m] if n == m => (*b, *n),
            s => return Err(shape_err("masked_softmax", format!("expected [B,N,N], got {s:?}"))),
        };
        if mask.len() != nn * nn {
            return Err(shape_err("masked_softmax", format!("mask of {} for {nn} nodes", mask.len())));
        }
        if let Some(i) = (0..nn).find(|&i| !mask[i * nn..(i + 1) * nn].iter().any(|&m| m)) {
            return Err(Error::MissingSelfLoop(i));
        }
        let x = self.value(scores).data();
        let mut out = vec![T::zero(); b * nn * nn];
        for bi in 0..b {
            for i in 0..nn {
                let row = &x[(bi * nn + i) * nn..(bi * nn + i + 1) * nn];
                let m = &mask[i * nn..(i + 1) * nn];
                let dst = &mut out[(bi * nn + i) * nn..(bi * nn + i + 1) * nn];
                let max = row
                    .iter()
                    .zip(m)
                    .filter(|(_, &keep)| keep)
                    .map(|(v, _)| *v)
                    .fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for j in 0..nn {
                    if m[j] {
                        dst[j] = (row[j] - max).exp();
                        sum += dst[j];
                    }
                }
                for v in dst.iter_mut() {
                    *v = *v / sum;
                }
            }
        }
        let value = Tensor::new(&[b, nn, nn], out)?;
        let rg = self.rg(scores);
        self.push("masked_softmax", value, Op::MaskedSoftmax(scores), rg)
    }

    /// `[B,N,M] x [B,M,D] -> [B,N,D]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (bs, n, m, d) = match (self.value(a).shape(), self.value(b).shape()) {
            ([b1, n, m], [b2, m2, d]) if b1 == b2 && m == m2 => (*b1, *n, *m, *d),
            (sa, sb) => return Err(shape_err("batch_matmul", format!("{sa:?} x {sb:?}"))),
        };
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); bs * n * d];
        for bi in 0..bs {
            gemm(
                Mat::new(&va[bi * n * m..(bi + 1) * n * m], n, m),
                Mat::new(&vb[bi * m * d..(bi + 1) * m * d], m, d),
                &mut out[bi * n * d..(bi + 1) * n * d],
                false,
            );
        }
        let value = Tensor::new(&[bs, n, d], out)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("batch_matmul", value, Op::BatchMatMul(a, b), rg)
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = match self.value(logits).shape() {
            [n, k] => (*n, *k),
            s => return Err(shape_err("softmax_cross_entropy", format!("expected [N,K], got {s:?}"))),
        };
        if labels.len() != n || labels.iter().any(|&l| l >= k) {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("{} labels for {n} rows of {k} classes", labels.len()),
            ));
        }
        let x = self.value(logits).data();
        let mut loss = T::zero();
        for (row, &label) in x.chunks(k).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|v| (*v - max).exp()).sum::<T>().ln() + max;
            loss += lse - row[label];
        }
        loss = loss / T::from_f64(n as f64);
        let probs = softmax_rows(x, k);
        let rg = self.rg(logits);
        self.push(
            "softmax_cross_entropy",
            Tensor::new(&[1], vec![loss])?,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Reverse pass from a single-element `loss`.
    ///
    /// A tape can be differentiated once; a further call without a new
    /// recorded operation fails with [`Error::BackwardTwice`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", "loss must be a single value"));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(dout) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.backward_node(idx, &dout, &mut grads);
            grads[idx] = Some(dout);
        }
        Ok(Gradients { grads })
    }

    /// Run [`Tape::backward`] and add parameter gradients into `store`.
    pub fn backward_into(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let grads = self.backward(loss)?;
        self.accumulate(&grads, store);
        Ok(grads)
    }

    /// Add the gradients of every parameter node into the store (`+=`).
    pub fn accumulate(&self, grads: &Gradients<T>, store: &mut ParamStore<T>) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, grads.grads[i].as_ref()) {
                let p = store.get_mut(*id);
                if p.kind != ParamKind::Trainable {
                    continue;
                }
                for (acc, v) in p.grad.data_mut().iter_mut().zip(g) {
                    *acc += *v;
                }
            }
        }
    }

    fn backward_node(&self, idx: usize, dout: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let mut send = |v: Var, g: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match grads[v.0].as_mut() {
                Some(acc) => {
                    for (a, x) in acc.iter_mut().zip(g) {
                        *a += x;
                    }
                }
                None => grads[v.0] = Some(g),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Reshape(x) => send(*x, dout.to_vec()),
            Op::Add(a, b) => {
                send(*a, dout.to_vec());
                send(*b, dout.to_vec());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                send(*a, dout.iter().zip(vb).map(|(g, y)| *g * *y).collect());
                send(*b, dout.iter().zip(va).map(|(g, x)| *g * *x).collect());
            }
            Op::Scale(x, s) => send(*x, dout.iter().map(|g| *g * *s).collect()),
            Op::Sum(x) => send(*x, vec![dout[0]; self.value(*x).len()]),
            Op::Act(x, act) => {
                let xs = self.value(*x).data();
                let ys = node.value.data();
                let g = match act {
                    Activation::Tanh => dout.iter().zip(ys).map(|(g, y)| *g * (T::one() - *y * *y)).collect(),
                    _ => dout
                        .iter()
                        .zip(xs.iter().zip(ys))
                        .map(|(g, (x, y))| *g * act.derivative(*x, *y))
                        .collect(),
                };
                send(*x, g);
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let n = self.value(*input).shape()[0];
                let f = self.value(*kernel).shape()[0];
                let g = kernels::conv2d_backward(
                    self.value(*input).data(),
                    n,
                    geom,
                    self.value(*kernel).data(),
                    f,
                    dout,
                    self.rg(*input),
                    self.rg(*kernel),
                    bias.is_some_and(|b| self.rg(b)),
                );
                if let Some(dx) = g.input {
                    send(*input, dx);
                }
                if let Some(dk) = g.kernel {
                    send(*kernel, dk);
                }
                if let (Some(b), Some(db)) = (bias, g.bias) {
                    send(*b, db);
                }
            }
            Op::AvgPool {
                input,
                window,
                stride,
            } => {
                let s = self.value(*input).shape();
                let dx = kernels::avg_pool_backward(dout, s[0] * s[1], s[2], s[3], *window, *stride);
                send(*input, dx);
            }
            Op::GlobalAvgPool(input) => {
                let s = self.value(*input).shape();
                let hw = s[2] * s[3];
                let inv = T::one() / T::from_f64(hw as f64);
                let mut dx = Vec::with_capacity(self.value(*input).len());
                for g in dout {
                    dx.extend(std::iter::repeat_n(*g * inv, hw));
                }
                send(*input, dx);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let s = self.value(*input).shape();
                let (n, c) = (s[0], s[1]);
                let hw: usize = s[2..].iter().product();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for si in 0..n {
                    for ch in 0..c {
                        let off = (si * c + ch) * hw;
                        for i in off..off + hw {
                            dgamma[ch] += dout[i] * xhat[i];
                            dbeta[ch] += dout[i];
                        }
                    }
                }
                if self.rg(*input) {
                    let gv = self.value(*gamma).data();
                    let mut dx = vec![T::zero(); dout.len()];
                    let count = T::from_f64((n * hw) as f64);
                    for si in 0..n {
                        for ch in 0..c {
                            let off = (si * c + ch) * hw;
                            let k = gv[ch] * inv_std[ch];
                            for i in off..off + hw {
                                dx[i] = if *train {
                                    k * (dout[i] - dbeta[ch] / count - xhat[i] * dgamma[ch] / count)
                                } else {
                                    k * dout[i]
                                };
                            }
                        }
                    }
                    send(*input, dx);
                }
                send(*gamma, dgamma);
                send(*beta, dbeta);
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let xs = self.value(*input);
                let ws = self.value(*weight);
                let (n, din) = (xs.shape()[0], xs.shape()[1]);
                let dout_dim = ws.shape()[1];
                let dmat = Mat::new(dout, n, dout_dim);
                if self.rg(*input) {
                    let mut dx = vec![T::zero(); n * din];
                    gemm(dmat, Mat::new(ws.data(), din, dout_dim).t(), &mut dx, false);
                    send(*input, dx);
                }
                if self.rg(*weight) {
                    let mut dw = vec![T::zero(); din * dout_dim];
                    gemm(Mat::new(xs.data(), n, din).t(), dmat, &mut dw, false);
                    send(*weight, dw);
                }
                if let Some(b) = bias {
                    let mut db = vec![T::zero(); dout_dim];
                    for row in dout.chunks(dout_dim) {
                        for (a, g) in db.iter_mut().zip(row) {
                            *a += *g;
                        }
                    }
                    send(*b, db);
                }
            }
            Op::MeanAxis1(input) => {
                let s = self.value(*input).shape();
                let (b, nn, d) = (s[0], s[1], s[2]);
                let inv = T::one() / T::from_f64(nn as f64);
                let mut dx = vec![T::zero(); b * nn * d];
                for bi in 0..b {
                    for i in 0..nn {
                        for k in 0..d {
                            dx[(bi * nn + i) * d + k] = dout[bi * d + k] * inv;
                        }
                    }
                }
                send(*input, dx);
            }
            Op::PairScores { wh, attn } => {
                let s = self.value(*wh).shape();
                let (b, nn, d) = (s[0], s[1], s[2]);
                let whv = self.value(*wh).data();
                let av = self.value(*attn).data();
                // dsrc[b,i] = sum_j de[b,i,j]; ddst[b,j] = sum_i de[b,i,j]
                let mut dsrc = vec![T::zero(); b * nn];
                let mut ddst = vec![T::zero(); b * nn];
                for bi in 0..b {
                    for i in 0..nn {
                        for j in 0..nn {
                            let g = dout[(bi * nn + i) * nn + j];
                            dsrc[bi * nn + i] += g;
                            ddst[bi * nn + j] += g;
                        }
                    }
                }
                if self.rg(*wh) {
                    let mut dwh = vec![T::zero(); whv.len()];
                    for r in 0..b * nn {
                        for k in 0..d {
                            dwh[r * d + k] = dsrc[r] * av[k] + ddst[r] * av[d + k];
                        }
                    }
                    send(*wh, dwh);
                }
                if self.rg(*attn) {
                    let mut da = vec![T::zero(); 2 * d];
                    for r in 0..b * nn {
                        for k in 0..d {
                            da[k] += dsrc[r] * whv[r * d + k];
                            da[d + k] += ddst[r] * whv[r * d + k];
                        }
                    }
                    send(*attn, da);
                }
            }
            Op::MaskedSoftmax(scores) => {
                let nn = node.value.shape()[2];
                let p = node.value.data();
                let mut dx = vec![T::zero(); p.len()];
                for ((pr, gr), dr) in p.chunks(nn).zip(dout.chunks(nn)).zip(dx.chunks_mut(nn)) {
                    let dot: T = pr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                    for j in 0..nn {
                        dr[j] = pr[j] * (gr[j] - dot);
                    }
                }
                send(*scores, dx);
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (bs, n, m, d) = (sa[0], sa[1], sa[2], sb[2]);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let mut da = vec![T::zero(); va.len()];
                    for bi in 0..bs {
                        gemm(
                            Mat::new(&dout[bi * n * d..(bi + 1) * n * d], n, d),
                            Mat::new(&vb[bi * m * d..(bi + 1) * m * d], m, d).t(),
                            &mut da[bi * n * m..(bi + 1) * n * m],
                            false,
                        );
                    }
                    send(*a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); vb.len()];
                    for bi in 0..bs {
                        gemm(
                            Mat::new(&va[bi * n * m..(bi + 1) * n * m], n, m).t(),
                            Mat::new(&dout[bi * n * d..(bi + 1) * n * d], n, d),
                            &mut db[bi * m * d..(bi + 1) * m * d],
                            false,
                        );
                    }
                    send(*b, db);
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.value(*logits).shape()[1];
                let scale = dout[0] / T::from_f64(labels.len() as f64);
                let mut dx = probs.clone();
                for (row, &label) in dx.chunks_mut(k).zip(labels) {
                    row[label] -= T::one();
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                send(*logits, dx);
            }
        }
    }
}

fn pair_terms<T: Scalar>(wh: &[T], attn: &[T], rows: usize, d: usize) -> (Vec<T>, Vec<T>) {
    let (a_src, a_dst) = attn.split_at(d);
    let mut src = vec![T::zero(); rows];
    let mut dst = vec![T::zero(); rows];
    for r in 0..rows {
        let h = &wh[r * d..(r + 1) * d];
        src[r] = h.iter().zip(a_src).map(|(x, a)| *x * *a).sum();
        dst[r] = h.iter().zip(a_dst).map(|(x, a)| *x * *a).sum();
    }
    (src, dst)
}
