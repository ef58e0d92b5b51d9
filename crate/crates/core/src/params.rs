use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::diff::{Array, Graph, Var};
use crate::error::{Error, Result};

/// Named parameter arrays in a fixed, insertion-defined order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Params(IndexMap<String, Array>);

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) {
        self.0.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.0.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Array> {
        self.get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array)> {
        self.0.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Total number of scalars across all arrays.
    pub fn num_scalars(&self) -> usize {
        self.0.values().map(Array::len).sum()
    }

    /// Same names, in the same order, with the same shapes.
    pub fn same_layout(&self, other: &Params) -> bool {
        self.0.len() == other.0.len()
            && self
                .0
                .iter()
                .zip(&other.0)
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }

    pub fn bit_eq(&self, other: &Params) -> bool {
        self.0.len() == other.0.len()
            && self
                .0
                .iter()
                .zip(&other.0)
                .all(|((ka, va), (kb, vb))| ka == kb && va.bit_eq(vb))
    }

    /// Concatenation of every array, in parameter order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.0.values().flat_map(|a| a.data().iter().copied()).collect()
    }

    /// A copy with values replaced from `flat` (layout of `self`).
    pub fn with_flat(&self, flat: &[f64]) -> Result<Params> {
        if flat.len() != self.num_scalars() {
            return Err(Error::dim("with_flat", &[self.num_scalars()], &[flat.len()]));
        }
        let mut out = self.clone();
        let mut at = 0;
        for a in out.0.values_mut() {
            let n = a.len();
            a.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(out)
    }

    /// Places every array on `g`, tracked (student) or as constants (teacher).
    pub fn bind(&self, g: &mut Graph, tracked: bool) -> Bound {
        let vars = self
            .0
            .iter()
            .map(|(k, v)| {
                let var = if tracked {
                    g.param(v.clone())
                } else {
                    g.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters placed on a graph, addressable by name.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter `{name}` not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}
