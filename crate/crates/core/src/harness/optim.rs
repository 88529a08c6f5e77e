//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::layers::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW<S: Scalar> {
    pub cfg: AdamWConfig,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
    t: u64,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(params: &ParamStore<S>, cfg: AdamWConfig) -> Self {
        let zeros = || params.values().iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Self { cfg, m: zeros(), v: zeros(), t: 0 }
    }

    /// Steps taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// `p <- p - lr wd p`, then the bias-corrected moment update.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore<S>, grads: &[Tensor<S>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters ({} optimizer slots)",
                grads.len(),
                params.len(),
                self.m.len()
            )));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Shape { op: "adamw", lhs: p.shape().to_vec(), rhs: g.shape().to_vec() });
            }
            if !g.all_finite() {
                return Err(Error::NonFinite { what: format!("gradient of {name}"), step: self.t as usize + 1 });
            }
        }
        self.t += 1;
        let c = self.cfg;
        let t = self.t as i32;
        let bc1 = S::c(1.0 - c.beta1.powi(t));
        let bc2 = S::c(1.0 - c.beta2.powi(t));
        let (b1, b2, eps) = (S::c(c.beta1), S::c(c.beta2), S::c(c.eps));
        let (lr_s, decay) = (S::c(lr), S::c(lr * c.weight_decay));
        for (k, p) in params.values_mut().iter_mut().enumerate() {
            let g = grads[k].data();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (i, p) in p.data_mut().iter_mut().enumerate() {
                *p = *p - decay * *p;
                m[i] = b1 * m[i] + (S::one() - b1) * g[i];
                v[i] = b2 * v[i] + (S::one() - b2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *p = *p - lr_s * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
