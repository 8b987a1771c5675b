use crate::error::{Error, Result};
use crate::objective::Objective;
use crate::tensor::ParameterSet;

/// Adaptive ascent step `ε̂`, aligned with the parameters it perturbs.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub epsilon_hat: ParameterSet,
}

impl Perturbation {
    pub fn is_zero(&self) -> bool {
        self.epsilon_hat.values().all(|v| v == 0.0)
    }
}

/// `ε̂ = ρ · (w² ⊙ g) / ‖w ⊙ g‖₂`, with one global norm over every entry.
/// A zero norm yields a zero perturbation.
pub fn compute_perturbation(params: &ParameterSet, grads: &ParameterSet, rho: f64) -> Result<Perturbation> {
    params.check_aligned(grads)?;
    if !params.all_finite() || !grads.all_finite() || !rho.is_finite() {
        return Err(Error::NonFinite("perturbation inputs".into()));
    }
    let norm = params
        .values()
        .zip(grads.values())
        .map(|(w, g)| (w * g) * (w * g))
        .sum::<f64>()
        .sqrt();
    let epsilon_hat = if norm == 0.0 || rho == 0.0 {
        params.zeros_like()
    } else {
        params.zip_map(grads, |w, g| rho * (w * w * g) / norm)?
    };
    Ok(Perturbation { epsilon_hat })
}

/// Result of the two-pass ascent/descent gradient.
#[derive(Debug, Clone)]
pub struct CreateStep {
    /// Gradient evaluated at `w + ε̂`.
    pub grads: ParameterSet,
    /// `L(w + ε̂)`.
    pub create_loss: f64,
    /// `L(w)`.
    pub base_loss: f64,
}

/// Gradient of the loss at the adaptively perturbed point. Parameters are
/// copied before the perturbation and restored from the copy afterwards, so
/// they are bitwise unchanged on return (including on error).
pub fn create_gradient<O: Objective + ?Sized>(objective: &mut O, rho: f64) -> Result<CreateStep> {
    create_gradient_within(objective, rho, |_| true)
}

/// [`create_gradient`] with the perturbation confined to tensors accepted by
/// `perturbed`; the norm in `ε̂` then runs over those tensors only.
pub fn create_gradient_within<O: Objective + ?Sized>(
    objective: &mut O,
    rho: f64,
    perturbed: impl Fn(&str) -> bool,
) -> Result<CreateStep> {
    if !(rho >= 0.0) {
        return Err(Error::InvalidArgument(format!("rho must be >= 0, got {rho}")));
    }
    let (base_loss, grads) = objective.loss_and_grad()?;
    let mut masked = grads.clone();
    for e in masked.iter_mut() {
        if !perturbed(&e.name) {
            e.tensor.data_mut().fill(0.0);
        }
    }
    let perturbation = compute_perturbation(objective.params(), &masked, rho)?;
    if perturbation.is_zero() {
        return Ok(CreateStep {
            grads,
            create_loss: base_loss,
            base_loss,
        });
    }
    let saved = objective.params().clone();
    objective.params_mut().axpy(1.0, &perturbation.epsilon_hat)?;
    let perturbed = objective.loss_and_grad();
    *objective.params_mut() = saved;
    let (create_loss, grads) = perturbed?;
    if !create_loss.is_finite() || !grads.all_finite() {
        return Err(Error::NonFinite(format!(
            "loss at perturbed point (rho {rho}, base loss {base_loss})"
        )));
    }
    Ok(CreateStep {
        grads,
        create_loss,
        base_loss,
    })
}
