//! Named parameter and gradient collections.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Scalar = f32> {
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Ordered collection of named parameter tensors.
///
/// Iteration follows insertion order, which is fixed by the model builder, so
/// every traversal is deterministic across runs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    entries: IndexMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    /// Inserts a trainable parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        self.entries.insert(
            name,
            Param {
                value,
                trainable: true,
            },
        );
        Ok(())
    }

    /// Replaces the value of an existing parameter, keeping its position.
    pub fn replace(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::shape(name, p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(|p| &mut p.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|p| p.trainable)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.entries
            .get_mut(name)
            .map(|p| p.trainable = trainable)
            .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, p)| (k.as_str(), &p.value))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars across all entries.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// Number of scalars in trainable entries (the `d` of θ ∈ R^d).
    pub fn trainable_scalar_count(&self) -> usize {
        self.trainable().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Hash of the names and exact bit patterns of the selected parameters.
    pub fn fingerprint_where(&self, mut keep: impl FnMut(&str) -> bool) -> u64 {
        let mut h = DefaultHasher::new();
        for (name, p) in &self.entries {
            if !keep(name) {
                continue;
            }
            name.hash(&mut h);
            p.value.shape().hash(&mut h);
            for v in p.value.data() {
                v.as_f64().to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint_where(|_| true)
    }
}

/// Gradients keyed by parameter name, in the same order as the store they
/// were computed for.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientStore<T: Scalar = f32> {
    grads: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> GradientStore<T> {
    pub fn new() -> Self {
        Self {
            grads: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor<T>) {
        self.grads.insert(name.into(), grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.grads.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Adds `other` into matching entries. Entries missing here are an error.
    pub fn accumulate(&mut self, other: &GradientStore<T>) -> Result<()> {
        for (name, g) in other.iter() {
            let slot = self
                .grads
                .get_mut(name)
                .ok_or_else(|| Error::MissingGradient(name.to_string()))?;
            slot.add_assign(g)?;
        }
        Ok(())
    }
}

impl<T: Scalar> FromIterator<(String, Tensor<T>)> for GradientStore<T> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        Self {
            grads: iter.into_iter().collect(),
        }
    }
}
