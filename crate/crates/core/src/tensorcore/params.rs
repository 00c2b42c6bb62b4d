use std::collections::HashMap;

use crate::error::{Error, Result};

use super::scalar::Scalar;
use super::tensor::Tensor;

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// A named value with a same-shaped gradient buffer. Non-trainable entries
/// (running statistics, fixed target statistics) ride along so checkpoints
/// capture the complete model state.
#[derive(Clone, Debug)]
pub struct ParamTensor<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

/// Flat, insertion-ordered parameter store for one model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<ParamTensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name:?}")));
        }
        let grad = Tensor::zeros(value.shape());
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id.0);
        self.params.push(ParamTensor {
            name,
            value,
            grad,
            trainable,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].grad
    }

    pub fn entry(&self, id: ParamId) -> &ParamTensor<T> {
        &self.params[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamTensor<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::ZERO);
        }
    }

    /// Plain SGD: `value -= lr * grad` on every trainable parameter.
    pub fn sgd_step(&mut self, lr: T) {
        for p in &mut self.params {
            if !p.trainable {
                continue;
            }
            for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data().iter()) {
                *v -= lr * *g;
            }
        }
    }

    /// Count of learnable scalar entries (trainable parameters only).
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Sum over all parameters of the L2 norm of the gradient.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data().iter())
            .map(|g| {
                let v = g.to_f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_grad(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data().iter())
            .map(|g| g.to_f64().abs())
            .fold(0.0, f64::max)
    }

    /// FNV-1a over names and value bit patterns, in insertion order.
    /// Bit-exact equality proxy for freeze contracts.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut mix = |byte: u8| {
            h ^= u64::from(byte);
            h = h.wrapping_mul(0x100000001b3);
        };
        for p in &self.params {
            for b in p.name.as_bytes() {
                mix(*b);
            }
            for v in p.value.data() {
                for b in v.to_f64().to_le_bytes() {
                    mix(b);
                }
            }
        }
        h
    }
}
