use std::collections::HashMap;

use crate::error::{Error, Result};

use super::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub frozen: bool,
}

/// Named parameter registry shared by every learned component.
///
/// Frozen parameters still participate in forward passes and let gradients
/// flow through them; they just never receive a gradient buffer and the
/// optimizer skips them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        let mut tensor = tensor;
        tensor.requires_grad = true;
        self.params.push(Param {
            name,
            tensor,
            frozen: false,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        let p = &mut self.params[id.0];
        p.frozen = frozen;
        p.tensor.requires_grad = !frozen;
        if frozen {
            p.tensor.grad = None;
        }
    }

    /// Freezes or unfreezes every parameter whose name starts with `prefix`.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) -> usize {
        let ids: Vec<ParamId> = self
            .iter()
            .filter(|(_, p)| p.name.starts_with(prefix))
            .map(|(id, _)| id)
            .collect();
        for &id in &ids {
            self.set_frozen(id, frozen);
        }
        ids.len()
    }

    /// Temporarily freezes every trainable parameter outside `prefix`.
    /// Returns the ids to hand back to [`ParamStore::release`].
    pub fn isolate(&mut self, prefix: &str) -> Vec<ParamId> {
        let ids: Vec<ParamId> = self
            .iter()
            .filter(|(_, p)| !p.name.starts_with(prefix) && !p.frozen)
            .map(|(id, _)| id)
            .collect();
        for &id in &ids {
            self.set_frozen(id, true);
        }
        ids
    }

    pub fn release(&mut self, ids: &[ParamId]) {
        for &id in ids {
            self.set_frozen(id, false);
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Adds a gradient into a trainable parameter's buffer.
    pub fn accumulate(&mut self, id: ParamId, grad: &[f64]) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.frozen {
            return Err(Error::Contract(format!(
                "gradient offered to frozen parameter `{}`",
                p.name
            )));
        }
        p.tensor.accumulate_grad(grad)
    }

    /// Multiplies every gradient buffer by `factor` (batch averaging).
    pub fn scale_grads(&mut self, factor: f64) {
        for p in &mut self.params {
            if let Some(g) = &mut p.tensor.grad {
                g.iter_mut().for_each(|v| *v *= factor);
            }
        }
    }

    pub fn num_values(&self, include_frozen: bool) -> usize {
        self.params
            .iter()
            .filter(|p| include_frozen || !p.frozen)
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Little-endian bytes of every parameter value under `prefix`, in
    /// registration order. Used for bit-exact frozen-weight comparisons.
    pub fn value_bytes(&self, prefix: &str) -> Vec<u8> {
        let mut out = Vec::new();
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            out.extend_from_slice(p.name.as_bytes());
            for v in p.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}
