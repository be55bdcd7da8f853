use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::{Module, TensorRole};
use crate::tensor::{Gradients, Tensor};

/// Adam with bias-corrected moments, keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new(0.9, 0.999, 1e-8)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every `(name, parameter, gradient)` triple. The step
    /// counter advances once per call, before bias correction.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = (&'a str, &'a mut Tensor, &'a [f64])>,
        lr: f64,
    ) -> Result<()> {
        let params: Vec<_> = params.into_iter().collect();
        for (name, p, g) in &params {
            if p.numel() != g.len() {
                return Err(Error::shape(
                    "adam",
                    format!("{name}: parameter has {} values, gradient {}", p.numel(), g.len()),
                ));
            }
        }
        self.step += 1;
        let (c1, c2) = self.corrections();
        for (name, p, g) in params {
            self.update(name, p.data_mut(), g, lr, c1, c2);
        }
        Ok(())
    }

    /// Updates every parameter of `module` that received a gradient; the rest
    /// (e.g. frozen sub-modules) are left untouched.
    pub fn step_module<M: Module + ?Sized>(&mut self, module: &mut M, grads: &Gradients, lr: f64) -> Result<()> {
        let mut mismatch = None;
        module.visit(&mut |name, t, role| {
            if role == TensorRole::Parameter {
                if let Some(g) = grads.by_name(name) {
                    if g.len() != t.numel() && mismatch.is_none() {
                        mismatch = Some(format!("{name}: parameter has {} values, gradient {}", t.numel(), g.len()));
                    }
                }
            }
        });
        if let Some(m) = mismatch {
            return Err(Error::shape("adam", m));
        }
        self.step += 1;
        let (c1, c2) = self.corrections();
        module.visit_mut(&mut |name, t, role| {
            if role == TensorRole::Parameter {
                if let Some(g) = grads.by_name(name) {
                    self.update(name, t.data_mut(), g, lr, c1, c2);
                }
            }
        });
        Ok(())
    }

    fn corrections(&self) -> (f64, f64) {
        let t = self.step as i32;
        (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t))
    }

    fn update(&mut self, name: &str, p: &mut [f64], g: &[f64], lr: f64, c1: f64, c2: f64) {
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; p.len()], vec![0.0; p.len()]));
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}
