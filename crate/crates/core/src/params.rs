//! Named trainable tensors with deterministic iteration order.

use crate::autodiff::{Tape, TensorId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use indexmap::IndexMap;

/// Map of trainable tensors. Iteration follows insertion order, so every
/// consumer (optimizer, serializer, gradient check) sees the same sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<F> {
    entries: IndexMap<String, Tensor<F>>,
}

impl<F: Scalar> Default for ParameterSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParameterSet<F> {
    pub fn new() -> Self {
        ParameterSet { entries: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name {name}")));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<F>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn total_len(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }

    /// Scalar count per dot-separated name prefix (one level deep).
    pub fn count_by_prefix(&self) -> Vec<(String, usize)> {
        let mut out: IndexMap<String, usize> = IndexMap::new();
        for (name, t) in &self.entries {
            let prefix = name.split('.').next().unwrap_or(name).to_string();
            *out.entry(prefix).or_insert(0) += t.numel();
        }
        out.into_iter().collect()
    }

    /// Merge another set under a prefix (`prefix.name`).
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParameterSet<F>) -> Result<()> {
        for (name, t) in other.iter() {
            self.insert(format!("{prefix}.{name}"), t.clone())?;
        }
        Ok(())
    }

    /// FNV-1a hash over names, shapes and value bit patterns; detects any
    /// mutation including sign flips on zero.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x1000_0000_01b3);
        };
        for (name, t) in &self.entries {
            for b in name.as_bytes() {
                eat(*b);
            }
            for d in &t.shape {
                for b in (*d as u64).to_le_bytes() {
                    eat(b);
                }
            }
            for v in &t.data {
                for b in v.as_f64().to_bits().to_le_bytes() {
                    eat(b);
                }
            }
        }
        h
    }
}

/// Parameter ids bound onto a tape for one forward pass.
pub struct Bound<'p, F> {
    ids: IndexMap<String, TensorId>,
    params: &'p ParameterSet<F>,
}

impl<'p, F: Scalar> Bound<'p, F> {
    /// Register every parameter as a `requires_grad` leaf on `tape`.
    pub fn bind(tape: &mut Tape<F>, params: &'p ParameterSet<F>) -> Self {
        let mut ids = IndexMap::new();
        for (name, t) in params.iter() {
            ids.insert(name.to_string(), tape.leaf(t.clone(), true));
        }
        Bound { ids, params }
    }

    /// Like [`Bound::bind`], but alias `override_name` to an existing tape
    /// node instead of the stored tensor. Finite-difference checks perturb a
    /// single tensor this way while everything else stays fixed.
    pub fn bind_with_override(
        tape: &mut Tape<F>,
        params: &'p ParameterSet<F>,
        override_name: &str,
        id: TensorId,
    ) -> Self {
        let mut ids = IndexMap::new();
        for (name, t) in params.iter() {
            if name == override_name {
                ids.insert(name.to_string(), id);
            } else {
                ids.insert(name.to_string(), tape.leaf(t.clone(), true));
            }
        }
        Bound { ids, params }
    }

    pub fn id(&self, name: &str) -> Result<TensorId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("unbound parameter {name}")))
    }

    pub fn params(&self) -> &ParameterSet<F> {
        self.params
    }

    /// Read accumulated leaf gradients back out of the tape, in parameter
    /// order, scaled by `scale`, and add them into `store`.
    pub fn accumulate_grads(&self, tape: &Tape<F>, scale: F, store: &mut GradStore<F>) {
        for (name, id) in &self.ids {
            let g = tape.grad(*id).expect("bound parameter has grad after backward");
            store.add_scaled(name, g, scale);
        }
    }
}

/// Flat gradient accumulator aligned with a [`ParameterSet`].
#[derive(Debug, Clone)]
pub struct GradStore<F> {
    grads: IndexMap<String, Vec<F>>,
}

impl<F: Scalar> GradStore<F> {
    pub fn zeros_like(params: &ParameterSet<F>) -> Self {
        let mut grads = IndexMap::new();
        for (name, t) in params.iter() {
            grads.insert(name.to_string(), vec![F::zero(); t.numel()]);
        }
        GradStore { grads }
    }

    pub fn add_scaled(&mut self, name: &str, g: &[F], scale: F) {
        let dst = self.grads.get_mut(name).expect("grad store covers all parameters");
        for (d, s) in dst.iter_mut().zip(g) {
            *d += *s * scale;
        }
    }

    pub fn get(&self, name: &str) -> &[F] {
        self.grads.get(name).expect("grad store covers all parameters")
    }

    pub fn zero(&mut self) {
        for g in self.grads.values_mut() {
            g.iter_mut().for_each(|v| *v = F::zero());
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[F])> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn has_non_finite(&self) -> bool {
        self.grads.values().any(|g| g.iter().any(|v| !v.is_finite()))
    }
}
