//! The create-and-find training engine.
//!
//! Training a task minimizes the loss at an adaptively perturbed point
//! ([`create_gradient`]), which builds a flat region around the minimum. After
//! the task, the diagonal empirical Fisher ([`find_fisher`]) scores how sharp
//! each parameter is. The next task is then trained inside the previous
//! region: an elementwise box clamp ([`clamp_to_region`]) and an
//! importance-weighted quadratic pull toward the anchor ([`soft_penalty`]).

mod constraint;
mod fisher;
mod optimizer;
mod perturbation;
mod sparse;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use constraint::{clamp_to_region, soft_penalty, FlatRegion};
pub use fisher::{accumulate_fisher, find_fisher, fisher_from_samples, random_importance, ImportanceMap};
pub use optimizer::{base_step, OptimizerState};
pub use perturbation::{compute_perturbation, create_gradient, create_gradient_within, CreateStep, Perturbation};
pub use sparse::build_sparse_mask;
pub use train::{
    constrained_names, derive_seed, evaluate_union, train_continual, train_task, ContinualRun, ContinualState,
    ProbeConfig, StepEvent, StepObserver, StepRecord, TaskContext, TaskOutcome, TaskReport,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseOptimizer {
    Sgd,
    AdamDecoupled,
}

/// Which components of the framework are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantFlags {
    /// Train on the gradient at the adaptively perturbed point.
    pub create: bool,
    /// Use Fisher importance as the penalty coefficients; otherwise random ones.
    pub find: bool,
    /// Project into the previous task's box after every step.
    pub clamp: bool,
    /// Add the importance-weighted quadratic penalty.
    pub l2: bool,
    /// Interleave replayed exemplars.
    pub replay: bool,
}

impl VariantFlags {
    pub const ALL: VariantFlags = VariantFlags {
        create: true,
        find: true,
        clamp: true,
        l2: true,
        replay: true,
    };

    pub const NONE: VariantFlags = VariantFlags {
        create: false,
        find: false,
        clamp: false,
        l2: false,
        replay: false,
    };
}

/// Named method variants. `Mtl` is the joint-training reference and has no
/// sequential flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Seq,
    Replay,
    Cf,
    CfMinusClamp,
    CfMinusFind,
    CfMinusL2,
    CfMinusCreate,
    CreateOnly,
    RandomIndicator,
    Mtl,
}

impl Variant {
    pub const ALL: [Variant; 10] = [
        Variant::Seq,
        Variant::Replay,
        Variant::Cf,
        Variant::CfMinusClamp,
        Variant::CfMinusFind,
        Variant::CfMinusL2,
        Variant::CfMinusCreate,
        Variant::CreateOnly,
        Variant::RandomIndicator,
        Variant::Mtl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Seq => "seq",
            Variant::Replay => "replay",
            Variant::Cf => "cf",
            Variant::CfMinusClamp => "cf_minus_clamp",
            Variant::CfMinusFind => "cf_minus_find",
            Variant::CfMinusL2 => "cf_minus_l2",
            Variant::CfMinusCreate => "cf_minus_create",
            Variant::CreateOnly => "create_only",
            Variant::RandomIndicator => "random_indicator",
            Variant::Mtl => "mtl",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown variant `{name}`")))
    }

    pub fn flags(self) -> VariantFlags {
        let all = VariantFlags::ALL;
        match self {
            Variant::Seq | Variant::Mtl => VariantFlags::NONE,
            Variant::Replay => VariantFlags {
                replay: true,
                ..VariantFlags::NONE
            },
            Variant::Cf => all,
            Variant::CfMinusClamp => VariantFlags { clamp: false, ..all },
            Variant::CfMinusFind | Variant::RandomIndicator => VariantFlags { find: false, ..all },
            Variant::CfMinusL2 | Variant::CreateOnly => VariantFlags {
                l2: false,
                find: false,
                ..all
            },
            Variant::CfMinusCreate => VariantFlags { create: false, ..all },
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Hyperparameters of one sequential training run. Defaults suit fine-tuning a
/// large pretrained encoder; the small synthetic benchmarks override them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub base_optimizer: BaseOptimizer,
    pub weight_decay: f64,
    /// Linear warm-up length in optimizer steps; constant afterwards.
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub lambda: f64,
    pub rho: f64,
    pub gamma: f64,
    pub fisher_sample_count: usize,
    pub validate_every_steps: usize,
    pub epochs: usize,
    pub flags: VariantFlags,
    pub sparse_update_ratio: f64,
    pub store_ratio: f64,
    pub replay_every: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 3e-5,
            batch_size: 8,
            base_optimizer: BaseOptimizer::AdamDecoupled,
            weight_decay: 0.01,
            warmup_steps: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            lambda: 50_000.0,
            rho: 0.65,
            gamma: 0.95,
            fisher_sample_count: 128,
            validate_every_steps: 50,
            epochs: 1,
            flags: VariantFlags::ALL,
            sparse_update_ratio: 1.0,
            store_ratio: 0.01,
            replay_every: 20,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.rho >= 0.0) {
            return bad(format!("rho must be >= 0, got {}", self.rho));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        if !(self.sparse_update_ratio > 0.0 && self.sparse_update_ratio <= 1.0) {
            return bad(format!(
                "sparse_update_ratio must lie in (0, 1], got {}",
                self.sparse_update_ratio
            ));
        }
        if !(self.store_ratio > 0.0 && self.store_ratio <= 1.0) {
            return bad(format!("store_ratio must lie in (0, 1], got {}", self.store_ratio));
        }
        if self.fisher_sample_count == 0 || self.validate_every_steps == 0 || self.epochs == 0 {
            return bad("fisher_sample_count, validate_every_steps and epochs must be >= 1".into());
        }
        if self.replay_every == 0 {
            return bad("replay_every must be >= 1".into());
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("weight_decay must be >= 0 and betas in [0, 1)".into());
        }
        Ok(())
    }
}
