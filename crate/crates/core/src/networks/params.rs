use std::collections::BTreeMap;

use ndarray::{ArrayD, ArrayView1, ArrayView4, Ix1, Ix4};

use crate::error::{Error, Result};

/// Named parameter arrays, iterated in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet {
    tensors: BTreeMap<String, ArrayD<f64>>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<f64>> {
        self.tensors.get_mut(name)
    }

    pub fn weight4(&self, name: &str) -> Result<ArrayView4<'_, f64>> {
        self.get(name)?
            .view()
            .into_dimensionality::<Ix4>()
            .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))
    }

    pub fn vector(&self, name: &str) -> Result<ArrayView1<'_, f64>> {
        self.get(name)?
            .view()
            .into_dimensionality::<Ix1>()
            .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Zero-filled set with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        ParameterSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), ArrayD::zeros(v.raw_dim())))
                .collect(),
        }
    }

    /// Entries whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> Self {
        ParameterSet {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParameterSet) {
        self.tensors.extend(other.tensors);
    }

    pub fn max_abs_diff(&self, other: &ParameterSet) -> f64 {
        self.tensors
            .iter()
            .filter_map(|(k, a)| other.tensors.get(k).map(|b| (a, b)))
            .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|v| v.is_finite()))
    }
}
