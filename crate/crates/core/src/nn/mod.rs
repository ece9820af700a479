//! Parameter storage and the layers the encoders are built from.
//!
//! Every layer exposes a forward pass that returns its output plus whatever it
//! must remember, and a backward pass that accumulates parameter gradients into
//! a [`Grads`] buffer and returns the input gradient.

mod attention;
mod gradcheck;
mod layers;

pub use attention::{AttentionCache, TransformerBlock};
pub use gradcheck::{grad_check, GradCheckReport};
pub use layers::{gelu, gelu_grad, Conv1d, ConvStack, ConvStackCache, LayerNorm, LayerNormCache, Linear, Mlp, MlpCache};

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal with the given standard deviation, redrawn outside ±2σ.
    TruncNormal(f64),
    Const(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
}

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    /// Register a tensor. Names must be unique.
    pub fn add<R: Rng + ?Sized>(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut R) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Config(format!("duplicate parameter name '{name}'")));
        }
        if shape.contains(&0) {
            return Err(Error::Config(format!("parameter '{name}' has a zero dimension")));
        }
        let len = shape.iter().product();
        let value = match init {
            Init::Const(c) => vec![T::of(c); len],
            Init::TruncNormal(std) => (0..len)
                .map(|_| loop {
                    let z: f64 = StandardNormal.sample(rng);
                    if z.abs() <= 2.0 {
                        break T::of(z * std);
                    }
                })
                .collect(),
        };
        self.params.push(Param {
            name,
            shape: shape.to_vec(),
            value,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[T] {
        &self.params[id.0].value
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&self) -> Grads<T> {
        Grads {
            g: self.params.iter().map(|p| vec![T::zero(); p.value.len()]).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    value: p.value.iter().map(|v| U::of(v.f64())).collect(),
                })
                .collect(),
        }
    }

    /// Add independent `N(0, std²)` noise to every value.
    pub fn jitter<R: Rng + ?Sized>(&mut self, std: f64, rng: &mut R) {
        for p in &mut self.params {
            for v in &mut p.value {
                let z: f64 = StandardNormal.sample(rng);
                *v += T::of(z * std);
            }
        }
    }

    /// Replace values from another store with identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(Error::Config(format!(
                "parameter count mismatch: {} vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::Config(format!(
                    "parameter '{}' {:?} does not match '{}' {:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
            a.value.clone_from(&b.value);
        }
        Ok(())
    }
}

/// Gradient buffers, one per parameter, with identical lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    pub g: Vec<Vec<T>>,
}

impl<T: Real> Grads<T> {
    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.g[id.0]
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[T] {
        &self.g[id.0]
    }

    pub fn add(&mut self, other: &Grads<T>) {
        for (a, b) in self.g.iter_mut().zip(&other.g) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        self.g.iter_mut().flatten().for_each(|x| *x *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.g.iter().flatten().all(|x| x.is_finite())
    }

    pub fn norm(&self) -> T {
        self.g.iter().flatten().map(|&x| x * x).sum::<T>().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_are_unique_and_grads_match_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamStore::<f32>::new();
        ps.add("a", &[2, 3], Init::TruncNormal(0.02), &mut rng).unwrap();
        ps.add("b", &[4], Init::Const(1.0), &mut rng).unwrap();
        assert!(ps.add("a", &[1], Init::Const(0.0), &mut rng).is_err());
        let g = ps.zero_grads();
        assert_eq!(g.g[0].len(), 6);
        assert_eq!(g.g[1].len(), 4);
        assert!(ps.get(ParamId(0)).iter().all(|v| v.abs() <= 0.04));
    }
}
