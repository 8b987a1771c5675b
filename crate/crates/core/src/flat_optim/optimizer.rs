use super::{BaseOptimizer, OptimizerConfig};
use crate::error::{Error, Result};
use crate::tensor::ParameterSet;

/// Moment estimates for the decoupled Adam update. Reset at each task start.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    step: u64,
    first: ParameterSet,
    second: ParameterSet,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Grows the moment buffers to cover any tensors added since the last step.
    fn fit_to(&mut self, params: &ParameterSet) -> Result<()> {
        if self.first.check_aligned(params).is_ok() {
            return Ok(());
        }
        let mut first = params.zeros_like();
        let mut second = params.zeros_like();
        for (dst, src) in [(&mut first, &self.first), (&mut second, &self.second)] {
            for e in src.iter() {
                let Some(t) = dst.get_mut(&e.name) else {
                    return Err(Error::Misaligned(format!("optimizer state for unknown `{}`", e.name)));
                };
                t.data_mut().copy_from_slice(e.tensor.data());
            }
        }
        self.first = first;
        self.second = second;
        Ok(())
    }
}

fn learning_rate(config: &OptimizerConfig, step: u64) -> f64 {
    if config.warmup_steps == 0 {
        config.learning_rate
    } else {
        config.learning_rate * (step as f64 / config.warmup_steps as f64).min(1.0)
    }
}

/// One update `w ← w − α·g` (SGD) or the bias-corrected Adam update with
/// decoupled weight decay. Coordinates where `mask` is zero are left
/// untouched; tensors absent from `mask` are fully updatable.
pub fn base_step(
    state: &mut OptimizerState,
    params: &mut ParameterSet,
    grads: &ParameterSet,
    mask: Option<&ParameterSet>,
    config: &OptimizerConfig,
) -> Result<()> {
    params.check_aligned(grads)?;
    if !grads.all_finite() {
        return Err(Error::NonFinite("gradients passed to the optimizer".into()));
    }
    state.fit_to(params)?;
    state.step += 1;
    let t = state.step;
    let lr = learning_rate(config, t);
    let decay = 1.0 - lr * config.weight_decay;
    let (b1, b2) = (config.beta1, config.beta2);
    let bias1 = 1.0 - b1.powi(t as i32);
    let bias2 = 1.0 - b2.powi(t as i32);
    for i in 0..params.len() {
        let name = params.entry(i).name.clone();
        let m = mask.and_then(|m| m.get(&name)).map(|t| t.data().to_vec());
        let g = grads.entry(i).tensor.data();
        let w = params.entry_mut(i).tensor.data_mut();
        let (first, second) = (
            state.first.entry_mut(i).tensor.data_mut(),
            state.second.entry_mut(i).tensor.data_mut(),
        );
        for j in 0..w.len() {
            if m.as_ref().is_some_and(|m| m[j] == 0.0) {
                continue;
            }
            if config.weight_decay != 0.0 {
                w[j] *= decay;
            }
            match config.base_optimizer {
                BaseOptimizer::Sgd => w[j] -= lr * g[j],
                BaseOptimizer::AdamDecoupled => {
                    first[j] = b1 * first[j] + (1.0 - b1) * g[j];
                    second[j] = b2 * second[j] + (1.0 - b2) * g[j] * g[j];
                    let m_hat = first[j] / bias1;
                    let v_hat = second[j] / bias2;
                    w[j] -= lr * m_hat / (v_hat.sqrt() + config.adam_eps);
                }
            }
        }
    }
    Ok(())
}
