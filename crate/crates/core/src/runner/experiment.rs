use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::{self, CheckpointMeta};
use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::flat_optim::{ContinualState, TaskReport, Variant};
use crate::metrics::{
    avg_accuracy_after_last, forgetting, intransigence, mean_std, train_multitask, Forgetting, Intransigence,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task: usize,
    pub steps: usize,
    pub best_step: usize,
    pub best_val_acc: f64,
    pub pinned_anchor_coords: usize,
    pub clamped_coords: usize,
}

impl From<&TaskReport> for TaskSummary {
    fn from(r: &TaskReport) -> Self {
        TaskSummary {
            task: r.task,
            steps: r.steps,
            best_step: r.best_step,
            best_val_acc: r.best_val_acc,
            pinned_anchor_coords: r.pinned_anchor_coords,
            clamped_coords: r.records.iter().map(|s| s.clamp_count).sum(),
        }
    }
}

/// Contents of a run's `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub variant: Variant,
    pub order: String,
    pub seed: u64,
    pub config_hash: String,
    pub avg_accuracy: f64,
    pub forgetting: Option<Forgetting>,
    pub intransigence: Option<Intransigence>,
    /// Jointly trained per-task test accuracies, when computed.
    pub reference: Option<Vec<f64>>,
    /// Top Hessian eigenvalue on the first task after each task.
    pub lambda_max: Vec<f64>,
    pub log_lambda_max: Vec<f64>,
    /// Tasks trained by this process (a resumed run omits earlier ones).
    pub tasks: Vec<TaskSummary>,
}

pub fn variant_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join(&cfg.name).join(cfg.variant.name())
}

pub fn run_dir(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    variant_dir(cfg).join(format!("seed{seed}"))
}

fn create_fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        let mut entries =
            std::fs::read_dir(dir).map_err(|e| Error::io(format!("reading {}", dir.display()), e))?;
        if entries.next().is_some() {
            return Err(Error::Config(format!(
                "output directory {} already exists and is not empty",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn append_steps(out: &mut String, report: &TaskReport) {
    for r in &report.records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            report.task + 1,
            r.step,
            r.loss,
            r.penalty,
            r.clamp_count,
            u8::from(r.replay)
        );
    }
}

/// Runs one seed into its own fresh directory. With `resume`, training
/// continues from a checkpoint written by a run of the same configuration.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, resume: Option<&Path>) -> Result<RunSummary> {
    let dir = run_dir(cfg, seed);
    create_fresh_dir(&dir)?;
    let hash = cfg.training_hash()?;
    let stream = cfg.stream(seed)?;
    let reference = if cfg.reference || cfg.variant == Variant::Mtl {
        Some(train_multitask(&stream, &cfg.model, &cfg.optimizer, seed)?.0)
    } else {
        None
    };

    if cfg.variant == Variant::Mtl {
        let reference = reference.expect("computed above");
        let values = reference.values().to_vec();
        let mut csv = String::from("task,accuracy\n");
        for (t, v) in values.iter().enumerate() {
            let _ = writeln!(csv, "{},{v}", t + 1);
        }
        write_file(&dir.join("reference.csv"), csv)?;
        let summary = RunSummary {
            name: cfg.name.clone(),
            variant: cfg.variant,
            order: cfg.order.clone(),
            seed,
            config_hash: hash,
            avg_accuracy: values.iter().sum::<f64>() / values.len() as f64,
            forgetting: None,
            intransigence: None,
            reference: Some(values),
            lambda_max: Vec::new(),
            log_lambda_max: Vec::new(),
            tasks: Vec::new(),
        };
        write_file(&dir.join("metrics.json"), serde_json::to_string_pretty(&summary)?)?;
        return Ok(summary);
    }

    let mut state = match resume {
        Some(path) => {
            let (state, meta) = checkpoint::load(path)?;
            if meta.config_hash != hash || meta.seed != seed {
                return Err(Error::Checkpoint(format!(
                    "{} was written by a different configuration or seed",
                    path.display()
                )));
            }
            state
        }
        None => ContinualState::new(&stream, &cfg.model, &cfg.optimizer, seed)?,
    };
    let meta = CheckpointMeta {
        config_hash: hash.clone(),
        seed,
    };
    let probe = cfg.probe.enabled.then(|| cfg.probe.probe_config());
    let mut steps = String::from("task,step,loss,penalty,clamp_count,replay\n");
    let mut tasks = Vec::new();
    while !state.is_done(&stream) {
        let outcome = state.advance(&stream, &cfg.optimizer, seed, probe.as_ref(), &mut ())?;
        log::info!(
            "{} {} seed {seed}: task {} done ({} steps, best val {:.4})",
            cfg.name,
            cfg.variant,
            outcome.report.task + 1,
            outcome.report.steps,
            outcome.report.best_val_acc
        );
        append_steps(&mut steps, &outcome.report);
        tasks.push(TaskSummary::from(&outcome.report));
        checkpoint::save(&dir.join(format!("ckpt_task{}.bin", state.next_task)), &state, &meta)?;
    }
    state.matrix.write_csv(&dir.join("matrix.csv"))?;
    write_file(&dir.join("steps.csv"), steps)?;
    let summary = RunSummary {
        name: cfg.name.clone(),
        variant: cfg.variant,
        order: cfg.order.clone(),
        seed,
        config_hash: hash,
        avg_accuracy: avg_accuracy_after_last(&state.matrix)?,
        forgetting: forgetting(&state.matrix),
        intransigence: reference
            .as_ref()
            .map(|r| intransigence(&state.matrix, r))
            .transpose()?,
        reference: reference.map(|r| r.values().to_vec()),
        log_lambda_max: state.lambda_max.iter().map(|l| l.max(1e-30).ln()).collect(),
        lambda_max: state.lambda_max,
        tasks,
    };
    write_file(&dir.join("metrics.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

type MetricFn = fn(&RunSummary) -> Option<f64>;

/// Summarizes every configured seed's `metrics.json` into `aggregate.csv`
/// (mean, sample std, count; seeds without results are counted as missing).
pub fn aggregate(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let mut summaries = Vec::new();
    let mut missing = 0;
    for &seed in &cfg.seeds {
        let path = run_dir(cfg, seed).join("metrics.json");
        match std::fs::read_to_string(&path) {
            Ok(text) => summaries.push(serde_json::from_str::<RunSummary>(&text)?),
            Err(_) => missing += 1,
        }
    }
    let metrics: [(&str, MetricFn); 4] = [
        ("avg_accuracy", |s| Some(s.avg_accuracy)),
        ("forgetting", |s| s.forgetting.as_ref().map(|f| f.mean)),
        ("intransigence", |s| s.intransigence.as_ref().map(|i| i.mean)),
        ("final_lambda_max", |s| s.lambda_max.last().copied()),
    ];
    let mut csv = String::from("variant,metric,mean,std,n,missing\n");
    for (name, get) in &metrics {
        let values: Vec<f64> = summaries.iter().filter_map(get).collect();
        let (mean, std) = match mean_std(&values) {
            Some((m, s)) => (m.to_string(), s.map(|s| s.to_string()).unwrap_or_default()),
            None => (String::new(), String::new()),
        };
        let _ = writeln!(
            csv,
            "{},{name},{mean},{std},{},{}",
            cfg.variant,
            values.len(),
            missing + summaries.len() - values.len()
        );
    }
    let dir = variant_dir(cfg);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let path = dir.join("aggregate.csv");
    write_file(&path, csv)?;
    Ok(path)
}

/// Runs every configured seed, recording failures per seed, then aggregates.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<(u64, std::result::Result<RunSummary, String>)>> {
    let mut results = Vec::new();
    for &seed in &cfg.seeds {
        let outcome = run_seed(cfg, seed, None).map_err(|e| {
            log::error!("seed {seed}: {e}");
            let dir = run_dir(cfg, seed);
            if dir.is_dir() {
                let _ = std::fs::write(dir.join("error.txt"), format!("{e}\n"));
            }
            e.to_string()
        });
        results.push((seed, outcome));
    }
    aggregate(cfg)?;
    Ok(results)
}
