//! Differentiable objectives over a [`ParameterSet`].
//!
//! The optimizer and the probes only need to read and write parameters and to
//! evaluate a loss with its gradient, so both the classifier and closed-form
//! surrogates plug in through the same trait.

use crate::error::{Error, Result};
use crate::tensor::{ParameterSet, Tensor};

pub trait Objective {
    fn params(&self) -> &ParameterSet;

    fn params_mut(&mut self) -> &mut ParameterSet;

    fn loss(&self) -> Result<f64>;

    fn loss_and_grad(&self) -> Result<(f64, ParameterSet)>;
}

/// `L(w) = ½ wᵀ A w + bᵀ w` with a dense symmetric `A` over a single vector `w`.
#[derive(Debug, Clone)]
pub struct QuadraticObjective {
    matrix: Vec<Vec<f64>>,
    linear: Vec<f64>,
    params: ParameterSet,
}

impl QuadraticObjective {
    pub fn new(matrix: Vec<Vec<f64>>, linear: Vec<f64>, w: Vec<f64>) -> Result<Self> {
        let n = w.len();
        if matrix.len() != n || matrix.iter().any(|r| r.len() != n) || linear.len() != n {
            return Err(Error::Shape {
                op: "quadratic",
                detail: format!("{}x? matrix, {} linear terms, {n} parameters", matrix.len(), linear.len()),
            });
        }
        let symmetric = matrix.iter().enumerate().all(|(i, row)| (0..i).all(|j| row[j] == matrix[j][i]));
        if !symmetric {
            return Err(Error::InvalidArgument("quadratic matrix must be symmetric".into()));
        }
        let mut params = ParameterSet::new();
        params.push("w", Tensor::vector(w))?;
        Ok(QuadraticObjective {
            matrix,
            linear,
            params,
        })
    }

    pub fn diagonal(diag: &[f64], w: Vec<f64>) -> Result<Self> {
        let n = diag.len();
        let matrix = (0..n)
            .map(|i| (0..n).map(|j| if i == j { diag[i] } else { 0.0 }).collect())
            .collect();
        Self::new(matrix, vec![0.0; n], w)
    }

    fn w(&self) -> &[f64] {
        self.params.entry(0).tensor.data()
    }

    fn grad_vec(&self) -> Vec<f64> {
        let w = self.w();
        self.matrix
            .iter()
            .zip(&self.linear)
            .map(|(row, b)| row.iter().zip(w).map(|(a, x)| a * x).sum::<f64>() + b)
            .collect()
    }
}

impl Objective for QuadraticObjective {
    fn params(&self) -> &ParameterSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    fn loss(&self) -> Result<f64> {
        let w = self.w();
        let aw: f64 = self
            .matrix
            .iter()
            .zip(w)
            .map(|(row, xi)| xi * row.iter().zip(w).map(|(a, x)| a * x).sum::<f64>())
            .sum();
        let bw: f64 = self.linear.iter().zip(w).map(|(b, x)| b * x).sum();
        Ok(0.5 * aw + bw)
    }

    fn loss_and_grad(&self) -> Result<(f64, ParameterSet)> {
        let mut grads = ParameterSet::new();
        grads.push("w", Tensor::vector(self.grad_vec()))?;
        Ok((self.loss()?, grads))
    }
}
