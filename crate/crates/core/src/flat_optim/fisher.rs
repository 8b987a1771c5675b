use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TaskDataset;
use crate::error::{Error, Result};
use crate::model::{Batch, MultiHeadClassifier};
use crate::tensor::ParameterSet;

/// Accumulated diagonal importance `F′` with its decay `γ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMap {
    values: ParameterSet,
    gamma: f64,
}

impl ImportanceMap {
    pub fn new(values: ParameterSet, gamma: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::InvalidArgument(format!("gamma must lie in [0, 1], got {gamma}")));
        }
        if values.values().any(|v| !(v >= 0.0)) {
            return Err(Error::InvalidArgument("importance values must be >= 0".into()));
        }
        Ok(ImportanceMap { values, gamma })
    }

    #[cfg(test)]
    pub(crate) fn from_values_unchecked(values: ParameterSet, gamma: f64) -> Self {
        ImportanceMap { values, gamma }
    }

    pub fn values(&self) -> &ParameterSet {
        &self.values
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

/// `F′ ← γ·F′ + F`. `fresh` may carry tensors the accumulator has not seen
/// yet (a newly added head); those start from zero. Every accumulated tensor
/// must exist in `fresh` with the same shape.
pub fn accumulate_fisher(importance: &ImportanceMap, fresh: &ParameterSet) -> Result<ImportanceMap> {
    for e in importance.values.iter() {
        match fresh.get(&e.name) {
            Some(t) if t.shape() == e.tensor.shape() => {}
            _ => {
                return Err(Error::Misaligned(format!(
                    "accumulated `{}` has no matching fresh entry",
                    e.name
                )))
            }
        }
    }
    if fresh.values().any(|v| !(v >= 0.0)) {
        return Err(Error::InvalidArgument("fresh importance must be >= 0".into()));
    }
    let gamma = importance.gamma;
    let mut out = fresh.clone();
    for e in out.iter_mut() {
        if let Some(old) = importance.values.get(&e.name) {
            for (x, &o) in e.tensor.data_mut().iter_mut().zip(old.data()) {
                *x += gamma * o;
            }
        }
    }
    Ok(ImportanceMap { values: out, gamma })
}

/// Mean squared log-likelihood gradient over every sample of `samples`.
pub fn fisher_from_samples(model: &MultiHeadClassifier, samples: &Batch) -> Result<ParameterSet> {
    let mut fisher = model.params().zeros_like();
    for i in 0..samples.len() {
        let g = model.log_prob_gradient(&samples.sample(i))?;
        for (f, ge) in fisher.iter_mut().zip(g.iter()) {
            for (x, &v) in f.tensor.data_mut().iter_mut().zip(ge.tensor.data()) {
                *x += v * v;
            }
        }
    }
    fisher.scale(1.0 / samples.len() as f64);
    Ok(fisher)
}

/// Diagonal empirical Fisher over `n_samples` training rows drawn without
/// replacement, using the true labels.
pub fn find_fisher(
    model: &MultiHeadClassifier,
    dataset: &TaskDataset,
    n_samples: usize,
    seed: u64,
) -> Result<ParameterSet> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be >= 1".into()));
    }
    let mut rows = dataset.splits.train.clone();
    if rows.is_empty() {
        return Err(Error::InvalidArgument(format!("dataset `{}` has no training rows", dataset.name)));
    }
    if rows.len() < n_samples {
        log::warn!(
            "dataset `{}` has {} training rows; using all of them for Fisher instead of {n_samples}",
            dataset.name,
            rows.len()
        );
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rows.shuffle(&mut rng);
        rows.truncate(n_samples);
    }
    fisher_from_samples(model, &dataset.batch(&rows)?)
}

/// Uniform random importance rescaled to the total mass of `reference`.
pub fn random_importance(reference: &ParameterSet, seed: u64) -> ParameterSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = reference.map(|_| rng.random::<f64>());
    let (target, drawn) = (reference.values().sum::<f64>(), out.values().sum::<f64>());
    if drawn > 0.0 {
        out.scale(target / drawn);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn vecset(v: &[f64]) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.push("w", Tensor::vector(v.to_vec())).unwrap();
        p
    }

    #[test]
    fn gamma_zero_takes_fresh() {
        let imp = ImportanceMap::new(vecset(&[3.0]), 0.0).unwrap();
        let out = accumulate_fisher(&imp, &vecset(&[0.5])).unwrap();
        assert_eq!(out.values().flatten(), vec![0.5]);
    }

    #[test]
    fn gamma_one_zero_fresh_unchanged() {
        let imp = ImportanceMap::new(vecset(&[3.0]), 1.0).unwrap();
        let out = accumulate_fisher(&imp, &vecset(&[0.0])).unwrap();
        assert_eq!(out.values().flatten(), vec![3.0]);
    }

    #[test]
    fn decay_then_add() {
        let imp = ImportanceMap::new(vecset(&[1.0]), 0.95).unwrap();
        let out = accumulate_fisher(&imp, &vecset(&[0.5])).unwrap();
        assert!((out.values().flatten()[0] - 1.45).abs() < 1e-15);
    }

    #[test]
    fn new_tensors_start_from_zero_and_missing_ones_fail() {
        let imp = ImportanceMap::new(vecset(&[1.0]), 0.5).unwrap();
        let mut fresh = vecset(&[1.0]);
        fresh.push("head", Tensor::vector(vec![2.0])).unwrap();
        let out = accumulate_fisher(&imp, &fresh).unwrap();
        assert_eq!(out.values().flatten(), vec![1.5, 2.0]);
        let mut other = ParameterSet::new();
        other.push("v", Tensor::vector(vec![1.0])).unwrap();
        assert!(accumulate_fisher(&imp, &other).is_err());
    }

    #[test]
    fn random_importance_keeps_mass_and_sign() {
        let r = random_importance(&vecset(&[1.0, 2.0, 3.0]), 4);
        assert!((r.values().sum::<f64>() - 6.0).abs() < 1e-12);
        assert!(r.values().all(|v| v >= 0.0));
        assert!(random_importance(&vecset(&[0.0, 0.0]), 4).values().all(|v| v == 0.0));
    }
}
