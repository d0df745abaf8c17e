//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] records every intermediate tensor together with the operation
//! that produced it. [`Tape::backward`] walks the record in reverse and returns
//! the gradient of a scalar with respect to every node that depends on a leaf
//! registered with `requires_grad = true`. Leaves registered without gradient
//! (frozen parameters, inputs) never receive one, so frozen networks cannot be
//! updated through the tape.

use std::rc::Rc;

use crate::error::{ensure, Result};
use crate::kernels::{conv_backward, conv_forward, ConvGeom};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-3;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Per-element supervision for the detection losses, laid out like the logits.
#[derive(Clone, Debug)]
pub struct DenseTarget {
    pub target: Vec<f64>,
    pub weight: Vec<f64>,
    pub normalizer: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct SmoothL1Params {
    pub beta: f64,
    /// Number of regression values per anchor; the last one is an angle.
    pub code_size: usize,
}

enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        batch: usize,
    },
    Relu(Var),
    Add(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
        len: usize,
    },
    Reshape(Var),
    GlobalAvgPool(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        stats: Option<BatchStats>,
    },
    PairSoftmax(Var),
    ChannelMul {
        x: Var,
        w: Var,
    },
    BatchScale {
        x: Var,
        factors: Vec<f64>,
    },
    Upsample2x(Var),
    Mse {
        a: Var,
        b: Var,
    },
    Focal {
        logits: Var,
        target: Rc<DenseTarget>,
        params: FocalParams,
    },
    SmoothL1 {
        pred: Var,
        target: Rc<DenseTarget>,
        params: SmoothL1Params,
    },
    Combine(Vec<(Var, f64)>),
    Scatter {
        src: Var,
        index: Vec<usize>,
        scale: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Batch statistics observed by a training-mode batch-norm node.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Grads(Vec<Option<Tensor>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.0[v.0].take()
    }
}

fn channels_and_inner(shape: &[usize]) -> (usize, usize, usize) {
    let n = shape[0];
    let c = shape[1];
    let inner = shape[2..].iter().product::<usize>();
    (n, c, inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// Convolution. `x` is `[N, C, H, W]` (2-D) or `[N, C, D, H, W]` (3-D);
    /// `w` is `[cout, cin, (kd,) kh, kw]`; padding is "same"-style `k / 2`.
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, stride: [usize; 3]) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (geom, out_shape) = match (xs.len(), ws.len()) {
            (4, 4) => {
                let geom = ConvGeom {
                    cin: xs[1],
                    cout: ws[0],
                    input: [1, xs[2], xs[3]],
                    kernel: [1, ws[2], ws[3]],
                    stride: [1, stride[1], stride[2]],
                    pad: [0, ws[2] / 2, ws[3] / 2],
                };
                let o = geom.output();
                (geom, vec![xs[0], ws[0], o[1], o[2]])
            }
            (5, 5) => {
                let geom = ConvGeom {
                    cin: xs[1],
                    cout: ws[0],
                    input: [xs[2], xs[3], xs[4]],
                    kernel: [ws[2], ws[3], ws[4]],
                    stride,
                    pad: [ws[2] / 2, ws[3] / 2, ws[4] / 2],
                };
                let o = geom.output();
                (geom, vec![xs[0], ws[0], o[0], o[1], o[2]])
            }
            _ => {
                return Err(crate::Error::Contract(format!(
                    "conv rank mismatch: input {xs:?}, weight {ws:?}"
                )))
            }
        };
        ensure!(
            ws[1] == xs[1],
            Contract,
            "conv expects {} input channels, got {}",
            ws[1],
            xs[1]
        );
        if let Some(b) = b {
            ensure!(
                self.value(b).len() == ws[0],
                Contract,
                "conv bias length {} != {}",
                self.value(b).len(),
                ws[0]
            );
        }
        let batch = xs[0];
        let data = conv_forward(
            &geom,
            batch,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Conv {
                x,
                w,
                b,
                geom,
                batch,
            },
            ng,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0));
        let ng = self.ng(x);
        self.push(v, Op::Relu(x), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure!(
            self.value(a).shape() == self.value(b).shape(),
            Contract,
            "add shape mismatch {:?} vs {:?}",
            self.value(a).shape(),
            self.value(b).shape()
        );
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).map(|a| a * s);
        let ng = self.ng(x);
        self.push(v, Op::Scale(x, s), ng)
    }

    /// Concatenate along the channel axis (axis 1).
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        ensure!(!parts.is_empty(), Contract, "concat of nothing");
        let first = self.value(parts[0]).shape().to_vec();
        let (n, _, inner) = channels_and_inner(&first);
        let mut total_c = 0;
        for &p in parts {
            let s = self.value(p).shape();
            ensure!(
                s.len() == first.len() && s[0] == n && s[2..] == first[2..],
                Contract,
                "concat shape mismatch {:?} vs {:?}",
                s,
                first
            );
            total_c += s[1];
        }
        let mut data = Vec::with_capacity(n * total_c * inner);
        for b in 0..n {
            for &p in parts {
                let t = self.value(p);
                let c = t.shape()[1];
                data.extend_from_slice(&t.data()[b * c * inner..(b + 1) * c * inner]);
            }
        }
        let mut shape = first.clone();
        shape[1] = total_c;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat(parts.to_vec()),
            ng,
        ))
    }

    /// Channels `[start, start + len)` of a tensor with batch and channel axes.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        ensure!(
            s.len() >= 2 && start + len <= s[1],
            Contract,
            "channel slice {start}..{} out of range for {:?}",
            start + len,
            s
        );
        let (n, c, inner) = channels_and_inner(&s);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * len * inner);
        for b in 0..n {
            let off = (b * c + start) * inner;
            data.extend_from_slice(&src[off..off + len * inner]);
        }
        let mut shape = s.clone();
        shape[1] = len;
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Slice { x, start, len },
            ng,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshaped(shape)?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::Reshape(x), ng))
    }

    /// Spatial mean: `[N, C, ...] -> [N, C, 1, 1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let s = self.value(x).shape().to_vec();
        let (n, c, inner) = channels_and_inner(&s);
        let data: Vec<f64> = self
            .value(x)
            .data()
            .chunks(inner)
            .map(|ch| ch.iter().sum::<f64>() / inner as f64)
            .collect();
        let ng = self.ng(x);
        self.push(
            Tensor::from_parts(vec![n, c, 1, 1], data),
            Op::GlobalAvgPool(x),
            ng,
        )
    }

    /// Batch normalization over every axis except channels.
    ///
    /// With `running = None` the batch statistics are used (training);
    /// otherwise the supplied `(mean, var)` are treated as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        let (n, c, inner) = channels_and_inner(&s);
        ensure!(
            self.value(gamma).len() == c && self.value(beta).len() == c,
            Contract,
            "batch-norm affine params must have {c} channels"
        );
        let xd = self.value(x).data();
        let count = (n * inner) as f64;
        let (mean, var, batch_stats) = match running {
            Some((m, v)) => {
                ensure!(
                    m.len() == c && v.len() == c,
                    Contract,
                    "running stats must have {c} channels"
                );
                (m.to_vec(), v.to_vec(), false)
            }
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * inner;
                        mean[ch] += xd[off..off + inner].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * inner;
                        var[ch] += xd[off..off + inner]
                            .iter()
                            .map(|v| (v - mean[ch]).powi(2))
                            .sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);
                (mean, var, true)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * inner;
                for i in off..off + inner {
                    xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + bt[ch];
                }
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let v = self.push(
            Tensor::from_parts(s, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                stats: batch_stats.then_some(BatchStats { mean, var }),
            },
            ng,
        );
        Ok(v)
    }

    /// Statistics computed by a training-mode batch-norm node, for running-average updates.
    pub fn batch_norm_stats(&self, v: Var) -> Option<&BatchStats> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { stats, .. } => stats.as_ref(),
            _ => None,
        }
    }

    /// Softmax over channel pairs `(c, c + C)` of a `[N, 2C, ...]` tensor.
    pub fn pair_softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        let (n, c2, inner) = channels_and_inner(&s);
        ensure!(
            c2 % 2 == 0,
            Contract,
            "pair softmax needs an even channel count"
        );
        let c = c2 / 2;
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                for i in 0..inner {
                    let il = (b * c2 + ch) * inner + i;
                    let ir = (b * c2 + ch + c) * inner + i;
                    let m = xd[il].max(xd[ir]);
                    let el = (xd[il] - m).exp();
                    let er = (xd[ir] - m).exp();
                    out[il] = el / (el + er);
                    out[ir] = er / (el + er);
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_parts(s, out), Op::PairSoftmax(x), ng))
    }

    /// `x[n, c, ...] * w[n, c]`; `w` may have a single channel that broadcasts.
    pub fn channel_mul(&mut self, x: Var, w: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        let (n, c, inner) = channels_and_inner(&s);
        let ws = self.value(w).shape();
        let wc = ws.get(1).copied().unwrap_or(0);
        ensure!(
            ws[0] == n && (wc == c || wc == 1) && self.value(w).len() == n * wc,
            Contract,
            "channel weights {:?} incompatible with {:?}",
            ws,
            s
        );
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![0.0; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let f = wd[b * wc + if wc == 1 { 0 } else { ch }];
                let off = (b * c + ch) * inner;
                for i in off..off + inner {
                    out[i] = xd[i] * f;
                }
            }
        }
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(Tensor::from_parts(s, out), Op::ChannelMul { x, w }, ng))
    }

    /// Multiply each batch item by a constant factor.
    pub fn batch_scale(&mut self, x: Var, factors: &[f64]) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        ensure!(
            factors.len() == s[0],
            Contract,
            "{} batch factors for batch of {}",
            factors.len(),
            s[0]
        );
        let per = self.value(x).len() / s[0];
        let mut out = self.value(x).data().to_vec();
        for (b, f) in factors.iter().enumerate() {
            out[b * per..(b + 1) * per].iter_mut().for_each(|v| *v *= f);
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::from_parts(s, out),
            Op::BatchScale {
                x,
                factors: factors.to_vec(),
            },
            ng,
        ))
    }

    /// Nearest-neighbour 2x upsampling of `[N, C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        ensure!(
            s.len() == 4,
            Contract,
            "upsample expects rank 4, got {:?}",
            s
        );
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * c * 4 * h * w];
        for plane in 0..n * c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(plane * 2 * h + y) * 2 * w + xx] = xd[(plane * h + y / 2) * w + xx / 2];
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::from_parts(vec![n, c, 2 * h, 2 * w], out),
            Op::Upsample2x(x),
            ng,
        ))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure!(
            self.value(a).shape() == self.value(b).shape(),
            Contract,
            "mse shape mismatch {:?} vs {:?}",
            self.value(a).shape(),
            self.value(b).shape()
        );
        let n = self.value(a).len().max(1) as f64;
        let v: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            / n;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::scalar(v), Op::Mse { a, b }, ng))
    }

    /// Sigmoid focal loss summed over weighted elements, divided by the normalizer.
    pub fn focal_loss(
        &mut self,
        logits: Var,
        target: Rc<DenseTarget>,
        params: FocalParams,
    ) -> Result<Var> {
        let len = self.value(logits).len();
        ensure!(
            target.target.len() == len && target.weight.len() == len,
            Contract,
            "focal target length mismatch"
        );
        let mut total = 0.0;
        for (i, &z) in self.value(logits).data().iter().enumerate() {
            let w = target.weight[i];
            if w == 0.0 {
                continue;
            }
            total += w * focal_term(z, target.target[i], params).0;
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(total / target.normalizer),
            Op::Focal {
                logits,
                target,
                params,
            },
            ng,
        ))
    }

    /// Smooth-L1 regression loss; the angle slot uses `sin(pred - target)` as residual.
    pub fn smooth_l1(
        &mut self,
        pred: Var,
        target: Rc<DenseTarget>,
        params: SmoothL1Params,
    ) -> Result<Var> {
        let s = self.value(pred).shape().to_vec();
        let len = self.value(pred).len();
        ensure!(
            target.target.len() == len && target.weight.len() == len,
            Contract,
            "regression target length mismatch"
        );
        ensure!(
            s.len() >= 2 && s[1].is_multiple_of(params.code_size),
            Contract,
            "regression channels {:?} not a multiple of code size",
            s
        );
        let mut total = 0.0;
        for (i, &p) in self.value(pred).data().iter().enumerate() {
            let w = target.weight[i];
            if w == 0.0 {
                continue;
            }
            let (r, _) = residual(p, target.target[i], is_angle(&s, i, params.code_size));
            total += w * smooth_l1(r, params.beta).0;
        }
        let ng = self.ng(pred);
        Ok(self.push(
            Tensor::scalar(total / target.normalizer),
            Op::SmoothL1 {
                pred,
                target,
                params,
            },
            ng,
        ))
    }

    /// Weighted sum of scalar nodes.
    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            ensure!(
                self.value(v).len() == 1,
                Contract,
                "combine expects scalars, got {:?}",
                self.value(v).shape()
            );
            total += w * self.value(v).item();
        }
        let ng = terms.iter().any(|&(v, _)| self.ng(v));
        Ok(self.push(Tensor::scalar(total), Op::Combine(terms.to_vec()), ng))
    }

    /// `out[index[i]] += scale[i] * src[i]` into a zero tensor of `shape`.
    pub fn scatter(
        &mut self,
        src: Var,
        index: Vec<usize>,
        scale: Vec<f64>,
        shape: &[usize],
    ) -> Result<Var> {
        let n = self.value(src).len();
        let out_len: usize = shape.iter().product();
        ensure!(
            index.len() == n && scale.len() == n,
            Contract,
            "scatter of {n} values with {} indices and {} scales",
            index.len(),
            scale.len()
        );
        ensure!(
            index.iter().all(|&i| i < out_len),
            Contract,
            "scatter index out of range for shape {:?}",
            shape
        );
        let mut out = vec![0.0; out_len];
        for ((&i, &s), &v) in index.iter().zip(&scale).zip(self.value(src).data()) {
            out[i] += s * v;
        }
        let ng = self.ng(src);
        Ok(self.push(
            Tensor::from_parts(shape.to_vec(), out),
            Op::Scatter { src, index, scale },
            ng,
        ))
    }

    /// Gradients of scalar `loss` with respect to every node that needs one.
    pub fn backward(&self, loss: Var) -> Grads {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar");
        if !self.ng(loss) {
            return Grads(grads);
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads(grads)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv {
                x,
                w,
                b,
                geom,
                batch,
            } => {
                let (gx, gw, gb) = conv_backward(
                    geom,
                    *batch,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gd,
                    self.ng(*x),
                    self.ng(*w),
                    b.is_some_and(|b| self.ng(b)),
                );
                if let Some(gx) = gx {
                    let s = self.value(*x).shape().to_vec();
                    self.accumulate(grads, *x, Tensor::from_parts(s, gx));
                }
                if let Some(gw) = gw {
                    let s = self.value(*w).shape().to_vec();
                    self.accumulate(grads, *w, Tensor::from_parts(s, gw));
                }
                if let (Some(gb), Some(b)) = (gb, b) {
                    let s = self.value(*b).shape().to_vec();
                    self.accumulate(grads, *b, Tensor::from_parts(s, gb));
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let data = gd
                    .iter()
                    .zip(xv.data())
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), data));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.map(|v| v * s)),
            Op::Concat(parts) => {
                let (n, total_c, inner) = channels_and_inner(g.shape());
                let mut offset = 0;
                for &p in parts {
                    let ps = self.value(p).shape().to_vec();
                    let c = ps[1];
                    if self.ng(p) {
                        let mut data = Vec::with_capacity(n * c * inner);
                        for b in 0..n {
                            let off = (b * total_c + offset) * inner;
                            data.extend_from_slice(&gd[off..off + c * inner]);
                        }
                        self.accumulate(grads, p, Tensor::from_parts(ps, data));
                    }
                    offset += c;
                }
            }
            Op::Slice { x, start, len } => {
                let xs = self.value(*x).shape().to_vec();
                let (n, c, inner) = channels_and_inner(&xs);
                let mut data = vec![0.0; n * c * inner];
                for b in 0..n {
                    let dst = (b * c + start) * inner;
                    let src = b * len * inner;
                    data[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                self.accumulate(grads, *x, Tensor::from_parts(xs, data));
            }
            Op::Reshape(x) => {
                let xs = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::from_parts(xs, gd.to_vec()));
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.value(*x).shape().to_vec();
                let (_, _, inner) = channels_and_inner(&xs);
                let mut data = Vec::with_capacity(self.value(*x).len());
                for &gv in gd {
                    data.extend(std::iter::repeat_n(gv / inner as f64, inner));
                }
                self.accumulate(grads, *x, Tensor::from_parts(xs, data));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                stats,
            } => {
                let xs = self.value(*x).shape().to_vec();
                let (n, c, inner) = channels_and_inner(&xs);
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * inner;
                        for i in off..off + inner {
                            dgamma[ch] += gd[i] * xhat[i];
                            dbeta[ch] += gd[i];
                        }
                    }
                }
                if self.ng(*x) {
                    let count = (n * inner) as f64;
                    let mut dx = vec![0.0; gd.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * inner;
                            for i in off..off + inner {
                                dx[i] = if stats.is_some() {
                                    gam[ch] * inv_std[ch] / count
                                        * (count * gd[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                                } else {
                                    gam[ch] * inv_std[ch] * gd[i]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_parts(xs, dx));
                }
                self.accumulate(grads, *gamma, Tensor::from_parts(vec![c], dgamma));
                self.accumulate(grads, *beta, Tensor::from_parts(vec![c], dbeta));
            }
            Op::PairSoftmax(x) => {
                let s = node.value.shape();
                let (n, c2, inner) = channels_and_inner(s);
                let c = c2 / 2;
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for b in 0..n {
                    for ch in 0..c {
                        for i in 0..inner {
                            let il = (b * c2 + ch) * inner + i;
                            let ir = (b * c2 + ch + c) * inner + i;
                            let dot = gd[il] * y[il] + gd[ir] * y[ir];
                            dx[il] = y[il] * (gd[il] - dot);
                            dx[ir] = y[ir] * (gd[ir] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(s.to_vec(), dx));
            }
            Op::ChannelMul { x, w } => {
                let s = self.value(*x).shape().to_vec();
                let (n, c, inner) = channels_and_inner(&s);
                let ws = self.value(*w).shape().to_vec();
                let wc = ws[1];
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                let mut dx = vec![0.0; xd.len()];
                let mut dw = vec![0.0; wd.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let wi = b * wc + if wc == 1 { 0 } else { ch };
                        let off = (b * c + ch) * inner;
                        for i in off..off + inner {
                            dx[i] = gd[i] * wd[wi];
                            dw[wi] += gd[i] * xd[i];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(s, dx));
                self.accumulate(grads, *w, Tensor::from_parts(ws, dw));
            }
            Op::BatchScale { x, factors } => {
                let s = self.value(*x).shape().to_vec();
                let per = gd.len() / s[0];
                let mut dx = gd.to_vec();
                for (b, f) in factors.iter().enumerate() {
                    dx[b * per..(b + 1) * per].iter_mut().for_each(|v| *v *= f);
                }
                self.accumulate(grads, *x, Tensor::from_parts(s, dx));
            }
            Op::Upsample2x(x) => {
                let s = self.value(*x).shape().to_vec();
                let (h, w) = (s[2], s[3]);
                let mut dx = vec![0.0; self.value(*x).len()];
                for plane in 0..s[0] * s[1] {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dx[(plane * h + y / 2) * w + xx / 2] +=
                                gd[(plane * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(s, dx));
            }
            Op::Mse { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let scale = 2.0 * gd[0] / av.len().max(1) as f64;
                let da: Vec<f64> = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(x, y)| scale * (x - y))
                    .collect();
                if self.ng(*b) {
                    let db = da.iter().map(|v| -v).collect();
                    self.accumulate(grads, *b, Tensor::from_parts(bv.shape().to_vec(), db));
                }
                self.accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), da));
            }
            Op::Focal {
                logits,
                target,
                params,
            } => {
                let lv = self.value(*logits);
                let scale = gd[0] / target.normalizer;
                let data = lv
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &z)| {
                        let w = target.weight[i];
                        if w == 0.0 {
                            0.0
                        } else {
                            scale * w * focal_term(z, target.target[i], *params).1
                        }
                    })
                    .collect();
                self.accumulate(
                    grads,
                    *logits,
                    Tensor::from_parts(lv.shape().to_vec(), data),
                );
            }
            Op::SmoothL1 {
                pred,
                target,
                params,
            } => {
                let pv = self.value(*pred);
                let s = pv.shape().to_vec();
                let scale = gd[0] / target.normalizer;
                let data = pv
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| {
                        let w = target.weight[i];
                        if w == 0.0 {
                            return 0.0;
                        }
                        let (r, dr) =
                            residual(p, target.target[i], is_angle(&s, i, params.code_size));
                        scale * w * smooth_l1(r, params.beta).1 * dr
                    })
                    .collect();
                self.accumulate(grads, *pred, Tensor::from_parts(s, data));
            }
            Op::Combine(terms) => {
                for &(v, w) in terms {
                    self.accumulate(grads, v, Tensor::scalar(gd[0] * w));
                }
            }
            Op::Scatter { src, index, scale } => {
                let sv = self.value(*src);
                let data = index.iter().zip(scale).map(|(&i, s)| s * gd[i]).collect();
                self.accumulate(grads, *src, Tensor::from_parts(sv.shape().to_vec(), data));
            }
        }
    }
}

fn is_angle(shape: &[usize], flat: usize, code_size: usize) -> bool {
    let inner: usize = shape[2..].iter().product();
    let channel = (flat / inner) % shape[1];
    channel % code_size == code_size - 1
}

fn residual(p: f64, t: f64, angle: bool) -> (f64, f64) {
    if angle {
        ((p - t).sin(), (p - t).cos())
    } else {
        (p - t, 1.0)
    }
}

/// Smooth-L1 value and derivative.
pub fn smooth_l1(r: f64, beta: f64) -> (f64, f64) {
    let a = r.abs();
    if a < beta {
        (0.5 * r * r / beta, r / beta)
    } else {
        (a - 0.5 * beta, r.signum())
    }
}

fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Sigmoid focal loss term for one logit and its derivative w.r.t. the logit.
///
/// `t` is a (possibly soft) target in `[0, 1]`; positive and negative parts are
/// weighted by `alpha` and `1 - alpha`.
pub fn focal_term(z: f64, t: f64, params: FocalParams) -> (f64, f64) {
    let FocalParams { gamma, alpha } = params;
    let p = sigmoid(z);
    let q = 1.0 - p;
    let mut value = 0.0;
    let mut grad = 0.0;
    if t > 0.0 {
        // -alpha * t * (1-p)^gamma * log(p)
        let lp = log_sigmoid(z);
        value += -alpha * t * q.powf(gamma) * lp;
        // d/dz: (1-p)^gamma * [gamma * p * log p - (1 - p)]
        grad += -alpha * t * (q.powf(gamma) * q - gamma * q.powf(gamma) * p * lp);
    }
    if t < 1.0 {
        // -(1-alpha) * (1-t) * p^gamma * log(1-p)
        let lq = log_sigmoid(-z);
        value += -(1.0 - alpha) * (1.0 - t) * p.powf(gamma) * lq;
        grad += -(1.0 - alpha) * (1.0 - t) * (gamma * p.powf(gamma) * q * lq - p.powf(gamma) * p);
    }
    (value, grad)
}
