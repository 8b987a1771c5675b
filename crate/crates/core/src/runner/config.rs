use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    gen_permuted_features, gen_rotated_gaussians, load_delimited, make_order, DelimitedSchema, PermutedSpec,
    RotatedGaussianSpec, TaskStream,
};
use crate::error::{Error, Result};
use crate::flat_optim::{OptimizerConfig, ProbeConfig, Variant};
use crate::model::ModelSpec;
use crate::objective::QuadraticObjective;

/// Where the tasks of an experiment come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BenchmarkSpec {
    RotatedGaussians(RotatedGaussianSpec),
    PermutedFeatures(PermutedSpec),
    /// One delimited file per task, in stream order.
    Files {
        paths: Vec<PathBuf>,
        #[serde(default)]
        has_header: bool,
    },
    /// `½ wᵀ diag(d) w` surrogate; only usable by the probe.
    Quadratic { diagonal: Vec<f64>, point: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    /// Run the Lanczos probe on the first task after every task.
    pub enabled: bool,
    pub lanczos_iters: usize,
    pub samples: usize,
    /// Ball radius and direction count for the standalone `probe` command.
    pub rho: f64,
    pub directions: usize,
}

impl Default for ProbeSection {
    fn default() -> Self {
        let p = ProbeConfig::default();
        ProbeSection {
            enabled: false,
            lanczos_iters: p.lanczos_iters,
            samples: p.samples,
            rho: 0.05,
            directions: 16,
        }
    }
}

impl ProbeSection {
    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            lanczos_iters: self.lanczos_iters,
            samples: self.samples,
        }
    }
}

/// A full experiment description, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Label used as the first output path component.
    pub name: String,
    pub benchmark: BenchmarkSpec,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default = "default_order")]
    pub order: String,
    /// Named task permutations; `identity` is always available.
    #[serde(default)]
    pub orders: BTreeMap<String, Vec<usize>>,
    #[serde(default)]
    pub model: ModelSpec,
    /// Component flags are ignored here; they follow from `variant`.
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub probe: ProbeSection,
    /// Also train the joint reference model to report intransigence.
    #[serde(default)]
    pub reference: bool,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}

fn default_variant() -> Variant {
    Variant::Cf
}

fn default_order() -> String {
    "identity".into()
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

/// Command-line overrides of single hyperparameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub rho: Option<f64>,
    pub lambda: Option<f64>,
    pub gamma: Option<f64>,
    pub sparse_ratio: Option<f64>,
    pub replay_every: Option<usize>,
    pub store_ratio: Option<f64>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.optimizer.flags = cfg.variant.flags();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        // Relative data paths are resolved against the config file.
        if let BenchmarkSpec::Files { paths, .. } = &mut cfg.benchmark {
            let base = path.parent().unwrap_or(Path::new("."));
            for p in paths.iter_mut() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("invalid experiment name {:?}", self.name)));
        }
        self.optimizer.validate()?;
        if self.probe.lanczos_iters == 0 || self.probe.samples == 0 || self.probe.directions == 0 {
            return Err(Error::Config("probe iterations, samples and directions must be >= 1".into()));
        }
        Ok(())
    }

    /// Switches the variant and resets the component flags to match it.
    pub fn set_variant(&mut self, variant: Variant) {
        self.variant = variant;
        self.optimizer.flags = variant.flags();
    }

    /// Applies overrides, rejecting any that the current variant would ignore.
    pub fn apply_overrides(&mut self, o: &Overrides) -> Result<()> {
        let f = self.variant.flags();
        let reject = |flag: &str, why: &str| {
            Err(Error::Config(format!(
                "--{flag} conflicts with variant `{}`: {why}",
                self.variant
            )))
        };
        if o.rho.is_some() && !(f.create || f.clamp) {
            return reject("rho", "it uses neither the perturbation nor the clamp");
        }
        if o.lambda.is_some() && !f.l2 {
            return reject("lambda", "it has no soft penalty");
        }
        if o.gamma.is_some() && !f.l2 {
            return reject("gamma", "it does not use accumulated importance");
        }
        if o.sparse_ratio.is_some() && !(f.l2 || f.clamp) {
            return reject("sparse-ratio", "it has no previous-task constraints");
        }
        if (o.replay_every.is_some() || o.store_ratio.is_some()) && !f.replay {
            return reject("replay-every/--store-ratio", "it does not replay");
        }
        let opt = &mut self.optimizer;
        if let Some(v) = o.rho {
            opt.rho = v;
        }
        if let Some(v) = o.lambda {
            opt.lambda = v;
        }
        if let Some(v) = o.gamma {
            opt.gamma = v;
        }
        if let Some(v) = o.sparse_ratio {
            opt.sparse_update_ratio = v;
        }
        if let Some(v) = o.replay_every {
            opt.replay_every = v;
        }
        if let Some(v) = o.store_ratio {
            opt.store_ratio = v;
        }
        self.validate()
    }

    fn task_count(&self) -> Result<usize> {
        Ok(match &self.benchmark {
            BenchmarkSpec::RotatedGaussians(s) => s.n_tasks,
            BenchmarkSpec::PermutedFeatures(s) => s.n_tasks,
            BenchmarkSpec::Files { paths, .. } => paths.len(),
            BenchmarkSpec::Quadratic { .. } => {
                return Err(Error::Config("the quadratic surrogate has no tasks".into()))
            }
        })
    }

    /// Task permutation of the configured order.
    pub fn order_permutation(&self) -> Result<Vec<usize>> {
        match self.orders.get(&self.order) {
            Some(p) => Ok(p.clone()),
            None if self.order == "identity" => Ok((0..self.task_count()?).collect()),
            None => Err(Error::Config(format!("unknown order `{}`", self.order))),
        }
    }

    /// Tasks in their base (unpermuted) order.
    pub fn base_stream(&self, seed: u64) -> Result<TaskStream> {
        match &self.benchmark {
            BenchmarkSpec::RotatedGaussians(s) => gen_rotated_gaussians(seed, s),
            BenchmarkSpec::PermutedFeatures(s) => gen_permuted_features(seed, s),
            BenchmarkSpec::Files { paths, has_header } => {
                let tasks = paths
                    .iter()
                    .enumerate()
                    .map(|(t, p)| {
                        let schema = DelimitedSchema {
                            has_header: *has_header,
                            seed,
                            task_id: t,
                            ..DelimitedSchema::default()
                        };
                        load_delimited(p, &schema)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(TaskStream {
                    tasks,
                    order_name: "identity".into(),
                })
            }
            BenchmarkSpec::Quadratic { .. } => Err(Error::Config("the quadratic surrogate has no tasks".into())),
        }
    }

    /// The stream a run trains on: the benchmark built from `seed`, then reordered.
    pub fn stream(&self, seed: u64) -> Result<TaskStream> {
        let base = self.base_stream(seed)?;
        make_order(&base, &self.order_permutation()?, &self.order)
    }

    pub fn quadratic(&self) -> Result<Option<QuadraticObjective>> {
        match &self.benchmark {
            BenchmarkSpec::Quadratic { diagonal, point } => Ok(Some(QuadraticObjective::diagonal(diagonal, point.clone())?)),
            _ => Ok(None),
        }
    }

    /// Digest of every setting that influences training, for checkpoint validation.
    pub fn training_hash(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Key<'a> {
            benchmark: &'a BenchmarkSpec,
            order: Vec<usize>,
            model: &'a ModelSpec,
            optimizer: &'a OptimizerConfig,
            probe_enabled: bool,
            probe: ProbeConfig,
        }
        let key = Key {
            benchmark: &self.benchmark,
            order: self.order_permutation()?,
            model: &self.model,
            optimizer: &self.optimizer,
            probe_enabled: self.probe.enabled,
            probe: self.probe.probe_config(),
        };
        let digest = Sha256::digest(serde_json::to_vec(&key)?);
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}
