use std::collections::HashMap;

use rand::Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        self.names.len() - 1
    }

    /// He-uniform weight: `U(−√(6/fan_in), √(6/fan_in))`.
    pub fn push_he<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> usize {
        let bound = (6.0 / fan_in as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| rng.random_range(-bound..bound));
        self.push(name, t)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|i| &self.tensors[i])
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Binds every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|t| g.leaf(t.clone(), requires_grad))
                .collect(),
        }
    }

    pub fn to_entries(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| (format!("{prefix}{n}"), t.clone()))
            .collect()
    }

    /// Overwrites every parameter from `entries` (names prefixed by `prefix`).
    /// Every parameter must be present with a matching shape.
    pub fn load_entries(&mut self, entries: &[(String, Tensor)], prefix: &str) -> Result<()> {
        let lookup: HashMap<&str, &Tensor> = entries
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|n| (n, t)))
            .collect();
        for (name, slot) in self.names.iter().zip(self.tensors.iter_mut()) {
            let t = lookup
                .get(name.as_str())
                .ok_or_else(|| Error::Structure(format!("checkpoint lacks {prefix}{name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Structure(format!(
                    "{prefix}{name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = (*t).clone();
        }
        Ok(())
    }

    /// Checks that `other` has identical names and shapes, in order.
    pub fn check_mirrors(&self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Structure("parameter names differ".into()));
        }
        for (i, (a, b)) in self.tensors.iter().zip(&other.tensors).enumerate() {
            if a.shape() != b.shape() {
                return Err(Error::Structure(format!(
                    "{}: shape {:?} vs {:?}",
                    self.names[i],
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Graph leaves for a [`ParamStore`], parallel to its ids.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: usize) -> Var {
        self.vars[id]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Substitutes the leaf of parameter `id`, e.g. to probe one tensor.
    pub fn with_var(mut self, id: usize, v: Var) -> Self {
        self.vars[id] = v;
        self
    }
}
