use std::collections::BTreeMap;

use super::kernels::{self, ConvGeometry};
use super::Tensor;
use crate::error::{Error, Result};

/// Added inside the log of the negative log-likelihood.
pub const NLL_EPS: f64 = 1e-12;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        outer: usize,
        axis_len: usize,
        inner: usize,
    },
    Conv1d {
        x: Var,
        weight: Var,
        bias: Option<Var>,
        geo: ConvGeometry,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    MeanTime(Var),
    Linear {
        x: Var,
        weight: Var,
        bias: Var,
    },
    Fuse {
        static_probs: Var,
        dynamic_probs: Var,
        gate: Var,
    },
    Nll {
        probs: Var,
        labels: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Batch statistics observed by a train-mode batch norm, to be folded into
/// the layer's running estimates once the step is done.
#[derive(Clone, Debug)]
pub struct RunningStatUpdate {
    pub layer: String,
    pub momentum: f64,
    pub mean: Vec<f64>,
    /// Unbiased (n − 1) variance estimate.
    pub var: Vec<f64>,
}

/// Per-channel (mean, unbiased variance) of a batch.
pub type BatchStats = (Vec<f64>, Vec<f64>);

/// Per-forward-pass operation record. Nodes are appended in execution order,
/// so every node's inputs precede it.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    stat_updates: Vec<RunningStatUpdate>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Named parameter leaf. The name is how [`Gradients::by_name`] finds it.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor, requires_grad: bool) -> Var {
        let v = self.leaf(value, requires_grad);
        self.params.push((name.into(), v));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn record_stat_update(&mut self, update: RunningStatUpdate) {
        self.stat_updates.push(update);
    }

    pub fn stat_updates(&self) -> &[RunningStatUpdate] {
        &self.stat_updates
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = &self.nodes[x.0].value;
        let data = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor {
            shape: t.shape().to_vec(),
            data,
        };
        self.push(op, value, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(Op::Add(a, b), value, &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(Op::Mul(a, b), value, &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), stable_sigmoid)
    }

    /// Softmax along `axis`, with the slice maximum subtracted first.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} invalid for {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * axis_len + a) * inner + i;
                let max = (0..axis_len).map(|a| src[idx(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for a in 0..axis_len {
                    let e = (src[idx(a)] - max).exp();
                    out[idx(a)] = e;
                    total += e;
                }
                for a in 0..axis_len {
                    out[idx(a)] /= total;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            Op::Softmax {
                x,
                outer,
                axis_len,
                inner,
            },
            value,
            &[x],
        ))
    }

    /// 1-D cross-correlation. `x` is [batch, in_ch, time], `weight` is
    /// [out_ch, in_ch / groups, kernel] and `bias` is [out_ch].
    pub fn conv1d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(weight);
        if xs.len() != 3 || ws.len() != 3 {
            return Err(Error::shape(
                "conv1d",
                format!("expected rank-3 input and weight, got {xs:?} and {ws:?}"),
            ));
        }
        let (batch, in_ch, len_in) = (xs[0], xs[1], xs[2]);
        let (out_ch, in_per_group, kernel) = (ws[0], ws[1], ws[2]);
        if stride == 0 || groups == 0 || in_ch % groups != 0 || out_ch % groups != 0 {
            return Err(Error::shape(
                "conv1d",
                format!("stride {stride} / groups {groups} invalid for {in_ch}→{out_ch} channels"),
            ));
        }
        if in_ch / groups != in_per_group {
            return Err(Error::shape(
                "conv1d",
                format!(
                    "input has {in_ch} channels but weight expects {} ({} groups)",
                    in_per_group * groups,
                    groups
                ),
            ));
        }
        if len_in + 2 * padding < kernel {
            return Err(Error::shape(
                "conv1d",
                format!("length {len_in} with padding {padding} shorter than kernel {kernel}"),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [out_ch] {
                return Err(Error::shape(
                    "conv1d",
                    format!("bias {:?} for {out_ch} output channels", self.shape(b)),
                ));
            }
        }
        let geo = ConvGeometry {
            batch,
            in_ch,
            out_ch,
            len_in,
            len_out: (len_in + 2 * padding - kernel) / stride + 1,
            kernel,
            stride,
            padding,
            groups,
        };
        let out = kernels::conv1d_forward(
            self.data(x),
            self.data(weight),
            bias.map(|b| self.data(b)),
            &geo,
        );
        let value = Tensor::new(vec![batch, out_ch, geo.len_out], out)?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.push(
            Op::Conv1d {
                x,
                weight,
                bias,
                geo,
            },
            value,
            &inputs,
        ))
    }

    /// Batch normalization over (batch, time) per channel of a [batch, ch, time]
    /// input. With `running = None` the batch statistics are used and returned
    /// as (mean, unbiased variance); otherwise the given (mean, var) pair is.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::shape("batch_norm", format!("expected rank 3, got {xs:?}")));
        }
        let (batch, ch, len) = (xs[0], xs[1], xs[2]);
        if self.shape(gamma) != [ch] || self.shape(beta) != [ch] {
            return Err(Error::shape(
                "batch_norm",
                format!("affine params must be [{ch}]"),
            ));
        }
        if running.is_none() && batch < 2 {
            return Err(Error::Contract(
                "train-mode batch norm needs a batch of at least 2".into(),
            ));
        }
        let src = self.data(x);
        let n = (batch * len) as f64;
        let mut inv_std = vec![0.0; ch];
        let mut batch_stats = None;
        let (mean, var) = match running {
            Some((m, v)) => {
                if m.len() != ch || v.len() != ch {
                    return Err(Error::shape("batch_norm", "running stats length".to_string()));
                }
                (m.to_vec(), v.to_vec())
            }
            None => {
                let mut mean = vec![0.0; ch];
                let mut var = vec![0.0; ch];
                for c in 0..ch {
                    let mut s = 0.0;
                    for b in 0..batch {
                        s += src[(b * ch + c) * len..][..len].iter().sum::<f64>();
                    }
                    let mu = s / n;
                    let mut ss = 0.0;
                    for b in 0..batch {
                        ss += src[(b * ch + c) * len..][..len]
                            .iter()
                            .map(|v| (v - mu) * (v - mu))
                            .sum::<f64>();
                    }
                    mean[c] = mu;
                    var[c] = ss / n;
                }
                let unbiased = var.iter().map(|v| v * n / (n - 1.0)).collect();
                batch_stats = Some((mean.clone(), unbiased));
                (mean, var)
            }
        };
        for c in 0..ch {
            inv_std[c] = 1.0 / (var[c] + eps).sqrt();
        }
        let g = self.data(gamma);
        let bt = self.data(beta);
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        for (row, (xr, (hr, or))) in src
            .chunks_exact(len)
            .zip(xhat.chunks_exact_mut(len).zip(out.chunks_exact_mut(len)))
            .enumerate()
        {
            let c = row % ch;
            for ((xv, h), o) in xr.iter().zip(hr.iter_mut()).zip(or.iter_mut()) {
                *h = (xv - mean[c]) * inv_std[c];
                *o = g[c] * *h + bt[c];
            }
        }
        let value = Tensor::new(xs, out)?;
        let v = self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: running.is_none(),
            },
            value,
            &[x, gamma, beta],
        );
        Ok((v, batch_stats))
    }

    /// Non-overlapping max pooling along time; a trailing remainder is dropped
    /// and ties resolve to the first maximum.
    pub fn max_pool(&mut self, x: Var, pool: usize) -> Result<Var> {
        if pool < 1 {
            return Err(Error::Contract("max-pool width must be at least 1".into()));
        }
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::shape("max_pool", format!("expected rank 3, got {xs:?}")));
        }
        let len_out = xs[2] / pool;
        if len_out == 0 {
            return Err(Error::shape(
                "max_pool",
                format!("length {} shorter than pool width {pool}", xs[2]),
            ));
        }
        let src = self.data(x);
        let rows = xs[0] * xs[1];
        let mut out = Vec::with_capacity(rows * len_out);
        let mut argmax = Vec::with_capacity(rows * len_out);
        for r in 0..rows {
            let row = &src[r * xs[2]..][..xs[2]];
            for j in 0..len_out {
                let mut best = j * pool;
                for i in j * pool + 1..(j + 1) * pool {
                    if row[i] > row[best] {
                        best = i;
                    }
                }
                out.push(row[best]);
                argmax.push(r * xs[2] + best);
            }
        }
        let value = Tensor::new(vec![xs[0], xs[1], len_out], out)?;
        Ok(self.push(Op::MaxPool { x, argmax }, value, &[x]))
    }

    /// Mean over the trailing (time) axis: [batch, ch, time] → [batch, ch].
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::shape(
                "global_avg_pool",
                format!("expected rank 3, got {xs:?}"),
            ));
        }
        let len = xs[2] as f64;
        let out = self
            .data(x)
            .chunks_exact(xs[2])
            .map(|r| r.iter().sum::<f64>() / len)
            .collect();
        let value = Tensor::new(vec![xs[0], xs[1]], out)?;
        Ok(self.push(Op::MeanTime(x), value, &[x]))
    }

    /// `x · weightᵀ + bias` with x [batch, in], weight [out, in], bias [out].
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(weight), self.shape(bias));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(Error::shape(
                "linear",
                format!("x {xs:?}, weight {ws:?}, bias {bs:?}"),
            ));
        }
        let (batch, fan_in, fan_out) = (xs[0], xs[1], ws[0]);
        let mut out = Vec::with_capacity(batch * fan_out);
        for _ in 0..batch {
            out.extend_from_slice(self.data(bias));
        }
        kernels::gemm(
            batch,
            fan_in,
            fan_out,
            self.data(x),
            (fan_in, 1),
            self.data(weight),
            (1, fan_in),
            1.0,
            &mut out,
        );
        let value = Tensor::new(vec![batch, fan_out], out)?;
        Ok(self.push(Op::Linear { x, weight, bias }, value, &[x, weight, bias]))
    }

    /// Gated concatenation `[g·static | (1 − g)·dynamic]` along the class axis.
    pub fn fuse(&mut self, static_probs: Var, dynamic_probs: Var, gate: Var) -> Result<Var> {
        let (ss, ds, gs) = (
            self.shape(static_probs),
            self.shape(dynamic_probs),
            self.shape(gate),
        );
        if ss.len() != 2 || ds.len() != 2 || ss[0] != ds[0] || gs != [ss[0], 1] {
            return Err(Error::shape(
                "fuse",
                format!("static {ss:?}, dynamic {ds:?}, gate {gs:?}"),
            ));
        }
        let (batch, ns, nd) = (ss[0], ss[1], ds[1]);
        let (ys, yd, g) = (
            self.data(static_probs),
            self.data(dynamic_probs),
            self.data(gate),
        );
        let mut out = Vec::with_capacity(batch * (ns + nd));
        for b in 0..batch {
            out.extend(ys[b * ns..][..ns].iter().map(|p| g[b] * p));
            out.extend(yd[b * nd..][..nd].iter().map(|p| (1.0 - g[b]) * p));
        }
        let value = Tensor::new(vec![batch, ns + nd], out)?;
        Ok(self.push(
            Op::Fuse {
                static_probs,
                dynamic_probs,
                gate,
            },
            value,
            &[static_probs, dynamic_probs, gate],
        ))
    }

    /// Mean negative log-likelihood of the labelled class under probability rows.
    pub fn nll(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let ps = self.shape(probs);
        if ps.len() != 2 || ps[0] != labels.len() {
            return Err(Error::shape(
                "nll",
                format!("probs {ps:?} for {} labels", labels.len()),
            ));
        }
        let classes = ps[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes,
            });
        }
        let p = self.data(probs);
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(b, &l)| -(p[b * classes + l] + NLL_EPS).ln())
            .sum();
        let value = Tensor::scalar(total / labels.len() as f64);
        Ok(self.push(
            Op::Nll {
                probs,
                labels: labels.to_vec(),
            },
            value,
            &[probs],
        ))
    }

    /// Reverse sweep from a scalar `loss`. Each node is visited once, and a
    /// node feeding several consumers accumulates all their contributions.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if root.requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, i: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(g) = self.slot(grads, v) {
                        add_into(g, dy);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a).to_vec(), self.data(*b).to_vec());
                if let Some(g) = self.slot(grads, *a) {
                    g.iter_mut().zip(dy.iter().zip(&bv)).for_each(|(g, (d, y))| *g += d * y);
                }
                if let Some(g) = self.slot(grads, *b) {
                    g.iter_mut().zip(dy.iter().zip(&av)).for_each(|(g, (d, x))| *g += d * x);
                }
            }
            Op::Sum(x) => {
                if let Some(g) = self.slot(grads, *x) {
                    g.iter_mut().for_each(|g| *g += dy[0]);
                }
            }
            Op::Relu(x) => {
                let xv = self.data(*x);
                if let Some(g) = self.slot(grads, *x) {
                    for ((g, d), v) in g.iter_mut().zip(dy).zip(xv) {
                        if *v > 0.0 {
                            *g += d;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                if let Some(g) = self.slot(grads, *x) {
                    for ((g, d), y) in g.iter_mut().zip(dy).zip(y) {
                        *g += d * y * (1.0 - y);
                    }
                }
            }
            Op::Softmax {
                x,
                outer,
                axis_len,
                inner,
            } => {
                let y = node.value.data();
                if let Some(g) = self.slot(grads, *x) {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let idx = |a: usize| (o * axis_len + a) * inner + i;
                            let dot: f64 = (0..*axis_len).map(|a| dy[idx(a)] * y[idx(a)]).sum();
                            for a in 0..*axis_len {
                                g[idx(a)] += y[idx(a)] * (dy[idx(a)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Conv1d {
                x,
                weight,
                bias,
                geo,
            } => {
                let want = (
                    self.requires_grad(*x),
                    self.requires_grad(*weight),
                    bias.is_some_and(|b| self.requires_grad(b)),
                );
                let cg = kernels::conv1d_backward(self.data(*x), self.data(*weight), dy, geo, want);
                if let (Some(d), Some(g)) = (cg.dx, self.slot(grads, *x)) {
                    add_into(g, &d);
                }
                if let (Some(d), Some(g)) = (cg.dw, self.slot(grads, *weight)) {
                    add_into(g, &d);
                }
                if let (Some(d), Some(b)) = (cg.db, *bias) {
                    if let Some(g) = self.slot(grads, b) {
                        add_into(g, &d);
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = node.value.shape();
                let (ch, len) = (shape[1], shape[2]);
                let n = (shape[0] * len) as f64;
                let mut sum_dy = vec![0.0; ch];
                let mut sum_dy_xhat = vec![0.0; ch];
                for (row, (d, h)) in dy.chunks_exact(len).zip(xhat.chunks_exact(len)).enumerate() {
                    let c = row % ch;
                    sum_dy[c] += d.iter().sum::<f64>();
                    sum_dy_xhat[c] += d.iter().zip(h).map(|(a, b)| a * b).sum::<f64>();
                }
                if let Some(g) = self.slot(grads, *beta) {
                    add_into(g, &sum_dy);
                }
                if let Some(g) = self.slot(grads, *gamma) {
                    add_into(g, &sum_dy_xhat);
                }
                let gv = self.data(*gamma).to_vec();
                if let Some(g) = self.slot(grads, *x) {
                    for (row, ((gr, d), h)) in g
                        .chunks_exact_mut(len)
                        .zip(dy.chunks_exact(len))
                        .zip(xhat.chunks_exact(len))
                        .enumerate()
                    {
                        let c = row % ch;
                        let scale = gv[c] * inv_std[c];
                        if *batch_stats {
                            let (mean_d, mean_dh) = (sum_dy[c] / n, sum_dy_xhat[c] / n);
                            for ((g, d), h) in gr.iter_mut().zip(d).zip(h) {
                                *g += scale * (d - mean_d - h * mean_dh);
                            }
                        } else {
                            for (g, d) in gr.iter_mut().zip(d) {
                                *g += scale * d;
                            }
                        }
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                if let Some(g) = self.slot(grads, *x) {
                    for (&src, d) in argmax.iter().zip(dy) {
                        g[src] += d;
                    }
                }
            }
            Op::MeanTime(x) => {
                let len = self.shape(*x)[2];
                if let Some(g) = self.slot(grads, *x) {
                    for (gr, d) in g.chunks_exact_mut(len).zip(dy) {
                        let share = d / len as f64;
                        gr.iter_mut().for_each(|g| *g += share);
                    }
                }
            }
            Op::Linear { x, weight, bias } => {
                let ws = self.shape(*weight);
                let (fan_out, fan_in) = (ws[0], ws[1]);
                let batch = dy.len() / fan_out;
                if self.requires_grad(*x) {
                    let w = self.data(*weight).to_vec();
                    if let Some(g) = self.slot(grads, *x) {
                        kernels::gemm(batch, fan_out, fan_in, dy, (fan_out, 1), &w, (fan_in, 1), 1.0, g);
                    }
                }
                if self.requires_grad(*weight) {
                    let xv = self.data(*x).to_vec();
                    if let Some(g) = self.slot(grads, *weight) {
                        kernels::gemm(fan_out, batch, fan_in, dy, (1, fan_out), &xv, (fan_in, 1), 1.0, g);
                    }
                }
                if let Some(g) = self.slot(grads, *bias) {
                    for row in dy.chunks_exact(fan_out) {
                        add_into(g, row);
                    }
                }
            }
            Op::Fuse {
                static_probs,
                dynamic_probs,
                gate,
            } => {
                let ns = self.shape(*static_probs)[1];
                let nd = self.shape(*dynamic_probs)[1];
                let (ys, yd, gv) = (
                    self.data(*static_probs).to_vec(),
                    self.data(*dynamic_probs).to_vec(),
                    self.data(*gate).to_vec(),
                );
                let n = ns + nd;
                if let Some(g) = self.slot(grads, *static_probs) {
                    for (b, gr) in g.chunks_exact_mut(ns).enumerate() {
                        for (j, v) in gr.iter_mut().enumerate() {
                            *v += gv[b] * dy[b * n + j];
                        }
                    }
                }
                if let Some(g) = self.slot(grads, *dynamic_probs) {
                    for (b, gr) in g.chunks_exact_mut(nd).enumerate() {
                        for (j, v) in gr.iter_mut().enumerate() {
                            *v += (1.0 - gv[b]) * dy[b * n + ns + j];
                        }
                    }
                }
                if let Some(g) = self.slot(grads, *gate) {
                    for (b, v) in g.iter_mut().enumerate() {
                        let s: f64 = (0..ns).map(|j| dy[b * n + j] * ys[b * ns + j]).sum();
                        let d: f64 = (0..nd).map(|j| dy[b * n + ns + j] * yd[b * nd + j]).sum();
                        *v += s - d;
                    }
                }
            }
            Op::Nll { probs, labels } => {
                let classes = self.shape(*probs)[1];
                let p = self.data(*probs).to_vec();
                let scale = dy[0] / labels.len() as f64;
                if let Some(g) = self.slot(grads, *probs) {
                    for (b, &l) in labels.iter().enumerate() {
                        let k = b * classes + l;
                        g[k] -= scale / (p[k] + NLL_EPS);
                    }
                }
            }
        }
    }

    /// Gradient accumulator for `v`, allocated on first use; `None` when `v`
    /// does not participate in differentiation.
    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    /// Gradient of `v`, or `None` if no gradient reached it.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor {
            shape: self.shapes[v.0].clone(),
            data: g.clone(),
        })
    }

    pub fn raw(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0)?.as_deref()
    }

    pub fn by_name(&self, name: &str) -> Option<&[f64]> {
        let (_, v) = self.params.iter().find(|(n, _)| n == name)?;
        self.raw(*v)
    }

    /// Gradients of every named parameter that received one.
    pub fn named(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .filter_map(|(n, v)| Some((n.clone(), self.get(*v)?)))
            .collect()
    }
}
