use rand::Rng;

use super::{fan_in_uniform, Mode, Module, TensorRole};
use crate::error::Result;
use crate::tensor::{Graph, RunningStatUpdate, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Conv1d {
    name: String,
    /// [out_ch, in_ch / groups, kernel]
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv1d {
    /// Stride 1 with "same" padding for odd kernels.
    pub fn new<R: Rng>(
        name: impl Into<String>,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        groups: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch / groups * kernel;
        let weight = fan_in_uniform(rng, &[out_ch, in_ch / groups, kernel], fan_in);
        let bias = bias.then(|| fan_in_uniform(rng, &[out_ch], fan_in));
        Conv1d {
            name: name.into(),
            weight,
            bias,
            stride: 1,
            padding: kernel / 2,
            groups,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1] * self.groups
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mode: Mode) -> Result<Var> {
        let grad = mode.tracks_grad();
        let w = g.param(format!("{}.weight", self.name), self.weight.clone(), grad);
        let b = self
            .bias
            .as_ref()
            .map(|b| g.param(format!("{}.bias", self.name), b.clone(), grad));
        g.conv1d(x, w, b, self.stride, self.padding, self.groups)
    }
}

impl Module for Conv1d {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, TensorRole)) {
        f(&format!("{}.weight", self.name), &self.weight, TensorRole::Parameter);
        if let Some(b) = &self.bias {
            f(&format!("{}.bias", self.name), b, TensorRole::Parameter);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, TensorRole)) {
        f(&format!("{}.weight", self.name), &mut self.weight, TensorRole::Parameter);
        if let Some(b) = &mut self.bias {
            f(&format!("{}.bias", self.name), b, TensorRole::Parameter);
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm1d {
    name: String,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm1d {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        BatchNorm1d {
            name: name.into(),
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// In [`Mode::Train`] the batch statistics are used and recorded on the
    /// graph for a later [`Module::apply_stat_updates`].
    pub fn forward(&self, g: &mut Graph, x: Var, mode: Mode) -> Result<Var> {
        let grad = mode.tracks_grad();
        let gamma = g.param(format!("{}.gamma", self.name), self.gamma.clone(), grad);
        let beta = g.param(format!("{}.beta", self.name), self.beta.clone(), grad);
        if mode.uses_batch_stats() {
            let (y, stats) = g.batch_norm(x, gamma, beta, None, self.eps)?;
            if let Some((mean, var)) = stats {
                g.record_stat_update(RunningStatUpdate {
                    layer: self.name.clone(),
                    momentum: self.momentum,
                    mean,
                    var,
                });
            }
            Ok(y)
        } else {
            let running = (self.running_mean.data(), self.running_var.data());
            Ok(g.batch_norm(x, gamma, beta, Some(running), self.eps)?.0)
        }
    }
}

impl Module for BatchNorm1d {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, TensorRole)) {
        f(&format!("{}.gamma", self.name), &self.gamma, TensorRole::Parameter);
        f(&format!("{}.beta", self.name), &self.beta, TensorRole::Parameter);
        f(&format!("{}.running_mean", self.name), &self.running_mean, TensorRole::Buffer);
        f(&format!("{}.running_var", self.name), &self.running_var, TensorRole::Buffer);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, TensorRole)) {
        f(&format!("{}.gamma", self.name), &mut self.gamma, TensorRole::Parameter);
        f(&format!("{}.beta", self.name), &mut self.beta, TensorRole::Parameter);
        f(&format!("{}.running_mean", self.name), &mut self.running_mean, TensorRole::Buffer);
        f(&format!("{}.running_var", self.name), &mut self.running_var, TensorRole::Buffer);
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    name: String,
    /// [out, in]
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng>(name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Linear {
            name: name.into(),
            weight: fan_in_uniform(rng, &[fan_out, fan_in], fan_in),
            bias: fan_in_uniform(rng, &[fan_out], fan_in),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mode: Mode) -> Result<Var> {
        let grad = mode.tracks_grad();
        let w = g.param(format!("{}.weight", self.name), self.weight.clone(), grad);
        let b = g.param(format!("{}.bias", self.name), self.bias.clone(), grad);
        g.linear(x, w, b)
    }
}

impl Module for Linear {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, TensorRole)) {
        f(&format!("{}.weight", self.name), &self.weight, TensorRole::Parameter);
        f(&format!("{}.bias", self.name), &self.bias, TensorRole::Parameter);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, TensorRole)) {
        f(&format!("{}.weight", self.name), &mut self.weight, TensorRole::Parameter);
        f(&format!("{}.bias", self.name), &mut self.bias, TensorRole::Parameter);
    }
}
