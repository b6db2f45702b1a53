use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    tensor: Tensor,
    trainable: bool,
}

/// Named model state: trainable parameters and non-trainable buffers
/// (batch-norm running statistics). Insertion order is the canonical order
/// used by the optimizer and by checkpoints.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(Entry {
            name,
            tensor,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.len())
            .sum()
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.tensor))
    }

    /// Copies gradients of bound parameters out of a finished graph.
    pub fn collect_grads(&mut self, graph: &super::Graph) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
        }
        for (id, var) in graph.bound_params() {
            if let Some(g) = graph.grad(var) {
                self.entries[id.0].tensor.set_grad(g.to_vec()).expect("grad shape");
            }
        }
    }

    /// Replaces values by name from checkpoint records; every entry must be present.
    pub fn load_named(&mut self, records: &[(String, Tensor)]) -> Result<()> {
        for e in &mut self.entries {
            let (_, t) = records
                .iter()
                .find(|(n, _)| *n == e.name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks record {:?}", e.name)))?;
            if t.shape() != e.tensor.shape() {
                return Err(Error::shape("load_named", e.tensor.shape(), t.shape()));
            }
            e.tensor = t.clone();
        }
        Ok(())
    }
}
