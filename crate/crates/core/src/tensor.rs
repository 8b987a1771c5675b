//! Dense row-major `f64` tensors and named parameter collections.
//!
//! [`ParameterSet`] is the common currency of the crate: model weights,
//! gradients, perturbations, importance values, masks and optimizer moments
//! all use it, so every elementwise routine only has to agree on names and
//! shapes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("shape {shape:?} needs {expected} elements, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a 2-D tensor from rows. All rows must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::Shape {
                    op: "from_rows",
                    detail: format!("row of length {} in a {cols}-column matrix", row.len()),
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        self.is_scalar().then(|| self.data[0])
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// An ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    entries: Vec<NamedTensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate parameter name `{name}`")));
        }
        self.entries.push(NamedTensor { name, tensor });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar elements.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedTensor> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut NamedTensor> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|e| e.name == name)
            .map(|e| &mut e.tensor)
    }

    pub fn entry(&self, i: usize) -> &NamedTensor {
        &self.entries[i]
    }

    pub fn entry_mut(&mut self, i: usize) -> &mut NamedTensor {
        &mut self.entries[i]
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|_| 0.0)
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .map(|e| NamedTensor {
                    name: e.name.clone(),
                    tensor: Tensor {
                        shape: e.tensor.shape.clone(),
                        data: e.tensor.data.iter().map(|&v| f(v)).collect(),
                    },
                })
                .collect(),
        }
    }

    /// Checks that both sets carry the same names and shapes in the same order.
    pub fn check_aligned(&self, other: &ParameterSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Misaligned(format!(
                "{} tensors vs {} tensors",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name || a.tensor.shape != b.tensor.shape {
                return Err(Error::Misaligned(format!(
                    "`{}` {:?} vs `{}` {:?}",
                    a.name, a.tensor.shape, b.name, b.tensor.shape
                )));
            }
        }
        Ok(())
    }

    /// Elementwise combination of two aligned sets.
    pub fn zip_map(&self, other: &ParameterSet, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_aligned(other)?;
        Ok(ParameterSet {
            entries: self
                .entries
                .iter()
                .zip(&other.entries)
                .map(|(a, b)| NamedTensor {
                    name: a.name.clone(),
                    tensor: Tensor {
                        shape: a.tensor.shape.clone(),
                        data: a
                            .tensor
                            .data
                            .iter()
                            .zip(&b.tensor.data)
                            .map(|(&x, &y)| f(x, y))
                            .collect(),
                    },
                })
                .collect(),
        })
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &ParameterSet) -> Result<()> {
        self.check_aligned(other)?;
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            for (x, &y) in a.tensor.data.iter_mut().zip(&b.tensor.data) {
                *x += alpha * y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for e in &mut self.entries {
            for x in &mut e.tensor.data {
                *x *= alpha;
            }
        }
    }

    pub fn dot(&self, other: &ParameterSet) -> Result<f64> {
        self.check_aligned(other)?;
        Ok(self
            .entries
            .iter()
            .zip(&other.entries)
            .flat_map(|(a, b)| a.tensor.data.iter().zip(&b.tensor.data))
            .map(|(x, y)| x * y)
            .sum())
    }

    pub fn sum_squares(&self) -> f64 {
        self.values().map(|v| v * v).sum()
    }

    /// Global L2 norm over every element of every tensor.
    pub fn norm(&self) -> f64 {
        self.sum_squares().sqrt()
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().flat_map(|e| e.tensor.data.iter().copied())
    }

    pub fn all_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values().collect()
    }

    /// Overwrites every element from a flat slice in entry order.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(Error::Misaligned(format!(
                "flat vector of {} elements for a set of {}",
                flat.len(),
                self.numel()
            )));
        }
        let mut offset = 0;
        for e in &mut self.entries {
            let n = e.tensor.data.len();
            e.tensor.data.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Copies values for every name in `self` from `source`.
    pub fn copy_from(&mut self, source: &ParameterSet) -> Result<()> {
        self.check_aligned(source)?;
        for (a, b) in self.entries.iter_mut().zip(&source.entries) {
            a.tensor.data.copy_from_slice(&b.tensor.data);
        }
        Ok(())
    }

    /// A new set holding only the named entries, in `self` order.
    pub fn subset<'a>(&self, keep: impl Fn(&str) -> bool + 'a) -> Self {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .filter(|e| keep(&e.name))
                .cloned()
                .collect(),
        }
    }

    pub fn bitwise_eq(&self, other: &ParameterSet) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name
                    && a.tensor.shape == b.tensor.shape
                    && a
                        .tensor
                        .data
                        .iter()
                        .zip(&b.tensor.data)
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}
