use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::tensor::{numel, Tensor};

/// Named trainable tensors, iterated in name order.
#[derive(Clone, Default, Debug)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a parameter. Non-gradient tensors are promoted to leaves.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(TensorError::Configuration(format!("duplicate parameter `{name}`")));
        }
        let t = if t.requires_grad() && t.is_leaf() { t } else { t.detach_param() };
        self.entries.insert(name, t);
        Ok(())
    }

    /// Replaces the values of an existing parameter.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let slot = self
            .entries
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        if slot.shape() != t.shape() {
            return Err(TensorError::Dimension(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                slot.shape(),
                t.shape()
            )));
        }
        *slot = t.detach_param();
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn zero_grads(&self) {
        self.entries.values().for_each(Tensor::zero_grad);
    }

    /// Moves every entry of `other` in under `prefix.`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: ParamSet) -> Result<()> {
        for (k, v) in other.entries {
            self.insert(format!("{prefix}.{k}"), v)?;
        }
        Ok(())
    }

    /// Entries whose name starts with `prefix.`, with the prefix stripped.
    pub fn sub(&self, prefix: &str) -> ParamSet {
        let head = format!("{prefix}.");
        ParamSet {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&head).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    /// Sets every parameter under `prefix.` whose name matches `pred` to zero.
    pub fn zero_where(&mut self, pred: impl Fn(&str) -> bool) {
        for (k, v) in self.entries.iter_mut() {
            if pred(k) {
                *v = Tensor::zeros(v.shape()).detach_param();
            }
        }
    }

    /// Flat little-endian bytes of all values in name order, with names and
    /// shapes interleaved; used for checksums.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (k, v) in &self.entries {
            out.extend_from_slice(k.as_bytes());
            out.push(0);
            for d in v.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for x in v.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }
}

/// He-uniform values: `U(−√(6/fan_in), √(6/fan_in))`.
pub fn he_uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let data = (0..numel(shape)).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::param(shape, data).expect("finite by construction")
}

pub fn zeros_param(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape).detach_param()
}

pub fn ones_param(shape: &[usize]) -> Tensor {
    Tensor::ones(shape).detach_param()
}
