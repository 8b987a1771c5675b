//! Sharpness measurements: ball and first-order sharpness, the Create-loss
//! decomposition, the Fisher trace identity and the Hessian's top eigenvalue
//! by Lanczos over finite-difference Hessian-vector products.
//!
//! Every probe restores the parameters from a copy, so they are bitwise
//! unchanged on return.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flat_optim::{create_gradient, fisher_from_samples};
use crate::model::{Batch, MultiHeadClassifier};
use crate::objective::Objective;
use crate::tensor::ParameterSet;

fn gaussian_like(template: &ParameterSet, rng: &mut ChaCha8Rng) -> ParameterSet {
    template.map(|_| StandardNormal.sample(rng))
}

/// Loss at `w + delta`, with `w` restored afterwards.
fn loss_at<O: Objective + ?Sized>(objective: &mut O, delta: &ParameterSet) -> Result<f64> {
    let saved = objective.params().clone();
    objective.params_mut().axpy(1.0, delta)?;
    let loss = objective.loss();
    *objective.params_mut() = saved;
    let loss = loss?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss at perturbed point".into()));
    }
    Ok(loss)
}

fn grad_at<O: Objective + ?Sized>(objective: &mut O, delta: &ParameterSet) -> Result<ParameterSet> {
    let saved = objective.params().clone();
    objective.params_mut().axpy(1.0, delta)?;
    let out = objective.loss_and_grad();
    *objective.params_mut() = saved;
    let (_, g) = out?;
    if !g.all_finite() {
        return Err(Error::NonFinite("gradient at displaced point".into()));
    }
    Ok(g)
}

/// `L(w + ρ g/‖g‖) − L(w)`; zero when the gradient vanishes.
pub fn gradient_direction_sharpness<O: Objective + ?Sized>(objective: &mut O, rho: f64) -> Result<f64> {
    let (base, g) = objective.loss_and_grad()?;
    let norm = g.norm();
    if norm == 0.0 {
        return Ok(0.0);
    }
    let mut eps = g;
    eps.scale(rho / norm);
    Ok(loss_at(objective, &eps)? - base)
}

/// Largest loss increase over `n_directions` random points of the ρ-sphere
/// and the gradient ascent direction.
pub fn ball_sharpness<O: Objective + ?Sized>(
    objective: &mut O,
    rho: f64,
    n_directions: usize,
    seed: u64,
) -> Result<f64> {
    if n_directions == 0 {
        return Err(Error::InvalidArgument("n_directions must be >= 1".into()));
    }
    if !(rho >= 0.0) {
        return Err(Error::InvalidArgument(format!("rho must be >= 0, got {rho}")));
    }
    let base = objective.loss()?;
    let mut worst = gradient_direction_sharpness(objective, rho)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..n_directions {
        let mut eps = gaussian_like(objective.params(), &mut rng);
        let norm = eps.norm();
        if norm == 0.0 {
            continue;
        }
        eps.scale(rho / norm);
        worst = worst.max(loss_at(objective, &eps)? - base);
    }
    Ok(worst)
}

/// `ρ‖∇L‖₂`.
pub fn first_order_sharpness<O: Objective + ?Sized>(objective: &O, rho: f64) -> Result<f64> {
    let (_, g) = objective.loss_and_grad()?;
    Ok(rho * g.norm())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CreateDecomposition {
    pub create_loss: f64,
    pub sharpness_term: f64,
    pub base_loss: f64,
}

impl CreateDecomposition {
    /// `|create_loss − (sharpness_term + base_loss)|`.
    pub fn residual(&self) -> f64 {
        (self.create_loss - (self.sharpness_term + self.base_loss)).abs()
    }
}

/// Splits the Create loss into the sharpness term and the plain loss.
pub fn create_decomposition_check<O: Objective + ?Sized>(objective: &mut O, rho: f64) -> Result<CreateDecomposition> {
    let step = create_gradient(objective, rho)?;
    Ok(CreateDecomposition {
        create_loss: step.create_loss,
        sharpness_term: step.create_loss - step.base_loss,
        base_loss: step.base_loss,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FisherTraceCheck {
    pub trace: f64,
    pub mean_sq_grad_norm: f64,
    pub rel_gap: f64,
}

/// Compares `tr F` with the mean squared log-likelihood gradient norm over the same samples.
pub fn fisher_trace_check(model: &MultiHeadClassifier, samples: &Batch) -> Result<FisherTraceCheck> {
    let trace: f64 = fisher_from_samples(model, samples)?.values().sum();
    let mut total = 0.0;
    for i in 0..samples.len() {
        total += model.log_prob_gradient(&samples.sample(i))?.sum_squares();
    }
    let mean_sq_grad_norm = total / samples.len() as f64;
    let scale = trace.abs().max(mean_sq_grad_norm.abs());
    let rel_gap = if scale == 0.0 {
        0.0
    } else {
        (trace - mean_sq_grad_norm).abs() / scale
    };
    Ok(FisherTraceCheck {
        trace,
        mean_sq_grad_norm,
        rel_gap,
    })
}

/// Default finite-difference step `1e-4 (1 + ‖w‖) / ‖v‖`.
pub fn default_hvp_step(params: &ParameterSet, v: &ParameterSet) -> f64 {
    1e-4 * (1.0 + params.norm()) / v.norm()
}

/// Central-difference Hessian-vector product `(g(w + r v) − g(w − r v)) / 2r`.
pub fn hvp<O: Objective + ?Sized>(objective: &mut O, v: &ParameterSet, r: Option<f64>) -> Result<ParameterSet> {
    objective.params().check_aligned(v)?;
    if !(v.norm() > 0.0) {
        return Err(Error::InvalidArgument("hvp direction must be non-zero and finite".into()));
    }
    let r = r.unwrap_or_else(|| default_hvp_step(objective.params(), v));
    if !(r > 0.0) {
        return Err(Error::InvalidArgument(format!("hvp step must be > 0, got {r}")));
    }
    let mut delta = v.clone();
    delta.scale(r);
    let plus = grad_at(objective, &delta)?;
    delta.scale(-1.0);
    let minus = grad_at(objective, &delta)?;
    plus.zip_map(&minus, |a, b| (a - b) / (2.0 * r))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LanczosEstimate {
    pub lambda_max: f64,
    /// `ln(max(λ, 1e-30))`.
    pub log_lambda_max: f64,
    pub iterations: usize,
    /// The Krylov space became invariant before `iters` steps.
    pub breakdown: bool,
}

/// Number of eigenvalues of the symmetric tridiagonal matrix below `x`.
fn sturm_count(alpha: &[f64], beta: &[f64], x: f64) -> usize {
    let mut count = 0;
    let mut d = 1.0;
    for i in 0..alpha.len() {
        let off = if i == 0 { 0.0 } else { beta[i - 1] * beta[i - 1] };
        d = alpha[i] - x - if i == 0 { 0.0 } else { off / d };
        if d == 0.0 {
            d = f64::EPSILON * (x.abs() + 1.0);
        }
        if d < 0.0 {
            count += 1;
        }
    }
    count
}

/// Largest eigenvalue of the symmetric tridiagonal matrix with diagonal
/// `alpha` and off-diagonal `beta`, by bisection on the Sturm count.
pub fn tridiagonal_max_eigenvalue(alpha: &[f64], beta: &[f64]) -> f64 {
    let n = alpha.len();
    let radius = |i: usize| {
        let left = if i > 0 { beta[i - 1].abs() } else { 0.0 };
        let right = if i + 1 < n { beta[i].abs() } else { 0.0 };
        left + right
    };
    let mut lo = (0..n).map(|i| alpha[i] - radius(i)).fold(f64::INFINITY, f64::min);
    let mut hi = (0..n).map(|i| alpha[i] + radius(i)).fold(f64::NEG_INFINITY, f64::max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if sturm_count(alpha, beta, mid) < n {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Top Hessian eigenvalue by Lanczos with full reorthogonalization, using
/// [`hvp`] as the operator. The start vector is Gaussian from `seed`.
pub fn lanczos_lambda_max<O: Objective + ?Sized>(objective: &mut O, iters: usize, seed: u64) -> Result<LanczosEstimate> {
    if iters == 0 {
        return Err(Error::InvalidArgument("lanczos needs iters >= 1".into()));
    }
    let n = objective.params().numel();
    let iters = iters.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q = gaussian_like(objective.params(), &mut rng);
    q.scale(1.0 / q.norm());
    let mut basis: Vec<ParameterSet> = Vec::with_capacity(iters);
    let (mut alpha, mut beta) = (Vec::new(), Vec::new());
    let mut breakdown = false;
    for j in 0..iters {
        let mut w = hvp(objective, &q, None)?;
        let a = q.dot(&w)?;
        alpha.push(a);
        basis.push(q);
        // Two Gram-Schmidt passes keep the basis orthogonal to working precision.
        for _ in 0..2 {
            for b in &basis {
                let c = b.dot(&w)?;
                w.axpy(-c, b)?;
            }
        }
        if j + 1 == iters {
            break;
        }
        let b = w.norm();
        if !(b > 1e-10 * (1.0 + a.abs())) {
            breakdown = true;
            break;
        }
        beta.push(b);
        w.scale(1.0 / b);
        q = w;
    }
    let lambda_max = tridiagonal_max_eigenvalue(&alpha, &beta);
    if !lambda_max.is_finite() {
        return Err(Error::NonFinite("lanczos eigenvalue".into()));
    }
    Ok(LanczosEstimate {
        lambda_max,
        log_lambda_max: lambda_max.max(1e-30).ln(),
        iterations: alpha.len(),
        breakdown,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SharpnessReport {
    pub ball_sharpness: f64,
    pub first_order_sharpness: f64,
    pub lambda_max: f64,
    pub log_lambda_max: f64,
    pub rho_used: f64,
    pub n_directions: usize,
    pub lanczos_iters: usize,
}

pub fn sharpness_report<O: Objective + ?Sized>(
    objective: &mut O,
    rho: f64,
    n_directions: usize,
    lanczos_iters: usize,
    seed: u64,
) -> Result<SharpnessReport> {
    let ball = ball_sharpness(objective, rho, n_directions, seed)?;
    let first = first_order_sharpness(objective, rho)?;
    let est = lanczos_lambda_max(objective, lanczos_iters, seed)?;
    Ok(SharpnessReport {
        ball_sharpness: ball,
        first_order_sharpness: first,
        lambda_max: est.lambda_max,
        log_lambda_max: est.log_lambda_max,
        rho_used: rho,
        n_directions,
        lanczos_iters: est.iterations,
    })
}
