use crate::autodiff::{Graph, NodeId};
use crate::error::{Result, WinnError};
use crate::tensor::Tensor;

/// Which part of `W = (w⁽⁰⁾, w⁽¹⁾)` a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// Top-layer weights combining the features.
    Top,
    /// Internal representation weights.
    Internal,
}

impl Role {
    pub fn tag(self) -> u8 {
        match self {
            Role::Top => 1,
            Role::Internal => 0,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(Role::Top),
            0 => Some(Role::Internal),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub role: Role,
}

/// Named, ordered parameter tensors of one classifier.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelParams {
    entries: Vec<ParamEntry>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor, role: Role) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(WinnError::config(format!("duplicate parameter name {name:?}")));
        }
        self.entries.push(ParamEntry { name, value, role });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|e| e.name == name).map(|e| &mut e.value)
    }

    pub fn values(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|e| &e.value)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|e| &mut e.value)
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Records every parameter as a differentiable leaf, in order.
    pub fn bind(&self, graph: &mut Graph) -> Vec<NodeId> {
        self.entries.iter().map(|e| graph.leaf(e.value.clone())).collect()
    }

    /// All parameters flattened into one vector, in entry order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_len());
        for e in &self.entries {
            out.extend_from_slice(e.value.data());
        }
        out
    }

    /// Inverse of [`ModelParams::flatten`].
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.total_len() {
            return Err(WinnError::usage(format!(
                "expected {} parameter values, got {}",
                self.total_len(),
                flat.len()
            )));
        }
        let mut off = 0;
        for e in &mut self.entries {
            let n = e.value.numel();
            e.value.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}
