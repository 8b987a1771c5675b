use serde::{Deserialize, Serialize};

use super::fisher::ImportanceMap;
use crate::error::{Error, Result};
use crate::tensor::{ParameterSet, Tensor};

/// Previous-task anchor `w★` with the box radius `ρ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatRegion {
    anchor: ParameterSet,
    rho: f64,
    constrained_names: Vec<String>,
}

impl FlatRegion {
    pub fn new(anchor: ParameterSet, rho: f64, constrained_names: Vec<String>) -> Result<Self> {
        if !(rho >= 0.0) {
            return Err(Error::InvalidArgument(format!("rho must be >= 0, got {rho}")));
        }
        if let Some(missing) = constrained_names.iter().find(|n| anchor.get(n).is_none()) {
            return Err(Error::Misaligned(format!("constrained `{missing}` has no anchor")));
        }
        Ok(FlatRegion {
            anchor,
            rho,
            constrained_names,
        })
    }

    /// Region over every tensor of the anchor.
    pub fn around(anchor: ParameterSet, rho: f64) -> Result<Self> {
        let names = anchor.names().map(str::to_string).collect();
        Self::new(anchor, rho, names)
    }

    pub fn anchor(&self) -> &ParameterSet {
        &self.anchor
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn constrained_names(&self) -> &[String] {
        &self.constrained_names
    }

    pub fn is_constrained(&self, name: &str) -> bool {
        self.constrained_names.iter().any(|n| n == name)
    }

    /// `(lower, upper)` box bounds of one coordinate.
    pub fn bounds(&self, anchor_value: f64) -> (f64, f64) {
        let half = self.rho * anchor_value.abs();
        (anchor_value - half, anchor_value + half)
    }

    /// Number of constrained coordinates whose anchor is exactly zero (their box is a point).
    pub fn pinned_count(&self) -> usize {
        self.constrained_names
            .iter()
            .filter_map(|n| self.anchor.get(n))
            .flat_map(|t| t.data().iter())
            .filter(|&&v| v == 0.0)
            .count()
    }

    fn pair<'a>(&'a self, params: &'a ParameterSet, name: &str) -> Result<(&'a Tensor, &'a Tensor)> {
        let anchor = self.anchor.get(name).expect("checked at construction");
        let current = params
            .get(name)
            .ok_or_else(|| Error::Misaligned(format!("parameter `{name}` missing")))?;
        if current.shape() != anchor.shape() {
            return Err(Error::Misaligned(format!(
                "`{name}`: {:?} vs anchor {:?}",
                current.shape(),
                anchor.shape()
            )));
        }
        Ok((current, anchor))
    }

    /// Largest amount by which any constrained coordinate leaves its box.
    pub fn max_violation(&self, params: &ParameterSet) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for name in &self.constrained_names {
            let (w, a) = self.pair(params, name)?;
            for (&x, &s) in w.data().iter().zip(a.data()) {
                let (lo, hi) = self.bounds(s);
                worst = worst.max(lo - x).max(x - hi);
            }
        }
        Ok(worst)
    }
}

/// `Σ F′ (w − w★)²` over the constrained names, with gradient `2 F′ (w − w★)`.
/// The gradient is aligned with `params`; unconstrained entries are zero.
pub fn soft_penalty(
    params: &ParameterSet,
    region: &FlatRegion,
    importance: &ImportanceMap,
) -> Result<(f64, ParameterSet)> {
    let mut grads = params.zeros_like();
    let mut value = 0.0;
    for name in region.constrained_names() {
        let (w, anchor) = region.pair(params, name)?;
        let f = importance
            .values()
            .get(name)
            .ok_or_else(|| Error::Misaligned(format!("no importance for `{name}`")))?;
        if f.shape() != w.shape() {
            return Err(Error::Misaligned(format!("importance shape for `{name}`")));
        }
        if f.data().iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::InvalidArgument(format!("negative importance in `{name}`")));
        }
        let g = grads.get_mut(name).expect("zeros_like keeps names").data_mut();
        for (i, ((&x, &s), &fi)) in w.data().iter().zip(anchor.data()).zip(f.data()).enumerate() {
            let d = x - s;
            value += fi * d * d;
            g[i] = 2.0 * fi * d;
        }
    }
    Ok((value, grads))
}

/// Projects every constrained coordinate into `[w★ − ρ|w★|, w★ + ρ|w★|]`.
/// Returns how many coordinates moved.
pub fn clamp_to_region(params: &mut ParameterSet, region: &FlatRegion) -> usize {
    let mut count = 0;
    for name in region.constrained_names() {
        let anchor = region.anchor().get(name).expect("checked at construction");
        let Some(w) = params.get_mut(name) else {
            continue;
        };
        for (x, &s) in w.data_mut().iter_mut().zip(anchor.data()) {
            let (lo, hi) = region.bounds(s);
            let clamped = x.max(lo).min(hi);
            if clamped != *x {
                *x = clamped;
                count += 1;
            }
        }
    }
    count
}
