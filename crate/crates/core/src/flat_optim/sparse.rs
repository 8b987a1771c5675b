use crate::error::{Error, Result};
use crate::tensor::{ParameterSet, Tensor};

/// Per-tensor update mask: within each named tensor, the `ratio` fraction of
/// coordinates with the lowest importance get 1 (updatable) and the rest 0.
/// At least one coordinate per tensor stays updatable; ties break by index.
pub fn build_sparse_mask(importance: &ParameterSet, ratio: f64, layers: &[String]) -> Result<ParameterSet> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!("ratio must lie in (0, 1], got {ratio}")));
    }
    let mut mask = ParameterSet::new();
    for name in layers {
        let values = importance
            .get(name)
            .ok_or_else(|| Error::Misaligned(format!("no importance for `{name}`")))?;
        let n = values.len();
        if n == 0 {
            return Err(Error::InvalidArgument(format!("layer `{name}` is empty")));
        }
        let keep = ((n as f64 * ratio).floor() as usize).clamp(1, n);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| values.data()[a].total_cmp(&values.data()[b]).then(a.cmp(&b)));
        let mut bits = vec![0.0; n];
        for &i in &order[..keep] {
            bits[i] = 1.0;
        }
        mask.push(name.clone(), Tensor::new(values.shape().to_vec(), bits)?)?;
    }
    Ok(mask)
}
