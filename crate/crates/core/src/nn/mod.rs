//! Layers and the two composite blocks used by the network.
//!
//! Every layer stores the fully qualified names of its tensors (e.g.
//! `static.blocks.0.conv1.weight`) so that graph parameters, gradients, the
//! optimizer state and checkpoint blobs all share one key space.

mod blocks;
mod layers;

pub use blocks::{BlockSpec, DwSepBlock, ResidualBlock};
pub use layers::{BatchNorm1d, Conv1d, Linear, BN_EPS, BN_MOMENTUM};

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, RunningStatUpdate, Tensor, Var};

/// Forward-pass behaviour.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; parameters receive gradients.
    Train,
    /// Running statistics; parameters are graph constants.
    Eval,
    /// Running statistics, but parameters still receive gradients. Used to
    /// differentiate single-sample forwards where batch statistics are undefined.
    EvalDifferentiable,
}

impl Mode {
    pub fn uses_batch_stats(self) -> bool {
        self == Mode::Train
    }

    pub fn tracks_grad(self) -> bool {
        self != Mode::Eval
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorRole {
    /// Trained by the optimizer.
    Parameter,
    /// Persistent state such as batch-norm running statistics.
    Buffer,
}

/// A named collection of tensors.
pub trait Module {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, TensorRole));

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, TensorRole));

    fn named_tensors(&self) -> Vec<(String, Tensor, TensorRole)> {
        let mut out = Vec::new();
        self.visit(&mut |n, t, r| out.push((n.to_string(), t.clone(), r)));
        out
    }

    fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t, r| {
            if r == TensorRole::Parameter {
                n += t.numel();
            }
        });
        n
    }

    /// Folds train-mode batch statistics into the running estimates.
    fn apply_stat_updates(&mut self, updates: &[RunningStatUpdate]) {
        if updates.is_empty() {
            return;
        }
        let mut by_name: HashMap<String, (&RunningStatUpdate, bool)> = HashMap::new();
        for u in updates {
            by_name.insert(format!("{}.running_mean", u.layer), (u, true));
            by_name.insert(format!("{}.running_var", u.layer), (u, false));
        }
        self.visit_mut(&mut |name, t, _| {
            if let Some((u, is_mean)) = by_name.get(name) {
                let batch = if *is_mean { &u.mean } else { &u.var };
                for (r, b) in t.data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - u.momentum) * *r + u.momentum * b;
                }
            }
        });
    }

    /// Copies tensors by name from `source`; every tensor of `self` must be found
    /// with a matching shape.
    fn load_named(&mut self, source: &HashMap<String, Tensor>) -> Result<()> {
        let mut failure = None;
        self.visit_mut(&mut |name, t, _| {
            if failure.is_some() {
                return;
            }
            match source.get(name) {
                Some(s) if s.shape() == t.shape() => t.data_mut().copy_from_slice(s.data()),
                Some(s) => {
                    failure = Some(format!(
                        "tensor {name}: stored shape {:?}, model expects {:?}",
                        s.shape(),
                        t.shape()
                    ))
                }
                None => failure = Some(format!("tensor {name} missing")),
            }
        });
        match failure {
            Some(msg) => Err(Error::Incompatible(msg)),
            None => Ok(()),
        }
    }
}

/// Uniform(−1/√fan_in, 1/√fan_in) initialization.
pub fn fan_in_uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

/// Finite-difference check of a scalar function with respect to every
/// trainable tensor of `module`. Returns the worst relative error, using the
/// same metric as [`crate::tensor::grad_check`].
///
/// `f` must build its forward in a gradient-tracking mode so that the module's
/// parameters become named graph leaves.
pub fn grad_check_parameters<M, F>(module: &M, f: F, eps: f64) -> Result<f64>
where
    M: Module + Clone,
    F: Fn(&M, &mut Graph) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(module, &mut g)?;
    let grads = g.backward(out)?;

    let eval = |m: &M| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(m, &mut g)?;
        g.value(out)
            .item()
            .ok_or_else(|| Error::Contract("function must return a scalar".into()))
    };

    let mut worst: f64 = 0.0;
    for (name, tensor, role) in module.named_tensors() {
        if role != TensorRole::Parameter {
            continue;
        }
        let analytic = grads
            .by_name(&name)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; tensor.numel()]);
        for (i, a) in analytic.iter().enumerate() {
            let perturbed = |delta: f64| {
                let mut m = module.clone();
                m.visit_mut(&mut |n, t, _| {
                    if n == name {
                        t.data_mut()[i] += delta;
                    }
                });
                m
            };
            let numeric = (eval(&perturbed(eps))? - eval(&perturbed(-eps))?) / (2.0 * eps);
            worst = worst.max((a - numeric).abs() / a.abs().max(1e-8));
        }
    }
    Ok(worst)
}
