//! First-order adaptive-moment optimizer (no weight decay, constant step).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Grads, ParamStore};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale gradients whose global norm exceeds this.
    pub clip_norm: Option<f64>,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(ps: &ParamStore<T>, lr: f64, betas: (f64, f64)) -> Result<Self> {
        if !(lr > 0.0) || !(0.0..1.0).contains(&betas.0) || !(0.0..1.0).contains(&betas.1) {
            return Err(Error::Config("adam needs lr > 0 and betas in [0, 1)".into()));
        }
        let zeros = || ps.params().iter().map(|p| vec![T::zero(); p.value.len()]).collect();
        Ok(Adam {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            clip_norm: None,
            step: 0,
            m: zeros(),
            v: zeros(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, ps: &mut ParamStore<T>, grads: &Grads<T>) -> Result<()> {
        if grads.g.len() != self.m.len() {
            return Err(Error::shape("adam", format!("{} tensors", self.m.len()), format!("{}", grads.g.len())));
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        let scale = match self.clip_norm {
            Some(c) => {
                let n = grads.norm().f64();
                if n > c {
                    c / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(self.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, t as f64);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let lr_t = T::of(self.lr * libm::sqrt(bc2) / bc1);
        let eps = T::of(self.eps * libm::sqrt(bc2));
        let scale = T::of(scale);
        for (i, p) in ps.params_mut().iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads.g[i]);
            for k in 0..p.value.len() {
                let gk = g[k] * scale;
                m[k] = b1 * m[k] + one_b1 * gk;
                v[k] = b2 * v[k] + one_b2 * gk * gk;
                p.value[k] -= lr_t * m[k] / (v[k].sqrt() + eps);
            }
        }
        Ok(())
    }
}
