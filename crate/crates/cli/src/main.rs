use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use flatspace::data::{write_delimited, Split};
use flatspace::flat_optim::Variant;
use flatspace::metrics::{avg_accuracy_after_last, forgetting, intransigence, AccuracyMatrix, ReferenceAccuracies};
use flatspace::model::ModelObjective;
use flatspace::probe::sharpness_report;
use flatspace::runner::{checkpoint, run_experiment, run_seed, ExperimentConfig, Overrides};
use flatspace::{Error, Result};

/// Continual learning with flat-region constraints.
#[derive(Parser, Debug)]
#[command(name = "flatspace", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a variant over the configured seeds and write result files.
    Run(RunArgs),
    /// Measure sharpness of a checkpoint on a task, or of a quadratic surrogate.
    Probe(ProbeArgs),
    /// Recompute summary metrics from a stored accuracy matrix.
    Metrics(MetricsArgs),
    /// Write the tasks of a benchmark as delimited text files.
    GenData(GenDataArgs),
}

#[derive(clap::Args, Debug)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    order: Option<String>,
    /// Run only this seed instead of every configured one.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    sparse_ratio: Option<f64>,
    #[arg(long)]
    replay_every: Option<usize>,
    #[arg(long)]
    store_ratio: Option<f64>,
    /// Continue from a checkpoint of the same configuration (needs --seed).
    #[arg(long, requires = "seed")]
    resume: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
struct ProbeArgs {
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint to probe; not needed for a quadratic benchmark.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Task whose data forms the probe batch (1-based).
    #[arg(long, default_value_t = 1)]
    task: usize,
    #[arg(long, value_parser = ["train", "val", "test"], default_value = "val")]
    split: String,
    /// Batch size; defaults to the config's probe sample count.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    order: Option<String>,
    /// Seed of the random directions; defaults to the checkpoint's run seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(clap::Args, Debug)]
struct MetricsArgs {
    /// `matrix.csv` written by `run`.
    #[arg(long)]
    matrix: PathBuf,
    /// Joint-training accuracies (`reference.csv`) for intransigence.
    #[arg(long)]
    reference: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    order: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

fn load_config(path: &Path, order: Option<&String>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(o) = order {
        cfg.order = o.clone();
    }
    Ok(cfg)
}

fn run(args: RunArgs) -> Result<()> {
    let mut cfg = load_config(&args.config, args.order.as_ref())?;
    if let Some(v) = &args.variant {
        cfg.set_variant(Variant::parse(v)?);
    }
    if let Some(out) = args.out {
        cfg.output_dir = out;
    }
    cfg.apply_overrides(&Overrides {
        rho: args.rho,
        lambda: args.lambda,
        gamma: args.gamma,
        sparse_ratio: args.sparse_ratio,
        replay_every: args.replay_every,
        store_ratio: args.store_ratio,
    })?;
    if let Some(seed) = args.seed {
        let s = run_seed(&cfg, seed, args.resume.as_deref())?;
        println!("{}", json!({"seed": seed, "avg_accuracy": s.avg_accuracy, "dir": flatspace::runner::run_dir(&cfg, seed)}));
        return Ok(());
    }
    let results = run_experiment(&cfg)?;
    let mut failed = Vec::new();
    for (seed, r) in results {
        match r {
            Ok(s) => println!("{}", json!({"seed": seed, "avg_accuracy": s.avg_accuracy})),
            Err(e) => failed.push(format!("seed {seed}: {e}")),
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!("{} seed(s) failed: {}", failed.len(), failed.join("; "))))
    }
}

fn probe(args: ProbeArgs) -> Result<()> {
    let cfg = load_config(&args.config, args.order.as_ref())?;
    let p = &cfg.probe;
    if let Some(mut q) = cfg.quadratic()? {
        let seed = args.seed.unwrap_or(cfg.seeds[0]);
        let report = sharpness_report(&mut q, p.rho, p.directions, p.lanczos_iters, seed)?;
        println!("{}", serde_json::to_string(&report)?);
        return Ok(());
    }
    let path = args
        .checkpoint
        .ok_or_else(|| Error::Config("--checkpoint is required unless the benchmark is quadratic".into()))?;
    let (mut state, meta) = checkpoint::load(&path)?;
    let stream = cfg.stream(meta.seed)?;
    let task = args
        .task
        .checked_sub(1)
        .filter(|&t| t < stream.len())
        .ok_or_else(|| Error::Config(format!("--task must lie in 1..={}", stream.len())))?;
    if task >= state.model.head_count() {
        return Err(Error::Config(format!("the checkpoint has not trained task {}", args.task)));
    }
    let split = match args.split.as_str() {
        "train" => Split::Train,
        "test" => Split::Test,
        _ => Split::Val,
    };
    let data = &stream.tasks[task];
    let rows = data.split(split);
    let rows = &rows[..rows.len().min(args.samples.unwrap_or(p.samples))];
    let batch = [data.batch(rows)?];
    let mut objective = ModelObjective::new(&mut state.model, &batch);
    let seed = args.seed.unwrap_or(meta.seed);
    let report = sharpness_report(&mut objective, p.rho, p.directions, p.lanczos_iters, seed)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn read_reference(path: &Path) -> Result<ReferenceAccuracies> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut values = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (i == 0 && line.starts_with("task")) {
            continue;
        }
        let cell = line.rsplit(',').next().unwrap_or(line).trim();
        let v = cell
            .parse()
            .map_err(|_| Error::Config(format!("{}:{}: bad accuracy `{cell}`", path.display(), i + 1)))?;
        values.push(v);
    }
    ReferenceAccuracies::new(values)
}

fn metrics(args: MetricsArgs) -> Result<()> {
    let matrix = AccuracyMatrix::read_csv(&args.matrix)?;
    let mut out = json!({
        "tasks": matrix.task_count(),
        "avg_accuracy": avg_accuracy_after_last(&matrix)?,
        "forgetting": forgetting(&matrix),
    });
    if let Some(path) = &args.reference {
        out["intransigence"] = serde_json::to_value(intransigence(&matrix, &read_reference(path)?)?)?;
    }
    println!("{out}");
    Ok(())
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let cfg = load_config(&args.config, args.order.as_ref())?;
    let stream = cfg.stream(args.seed)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(format!("creating {}", args.out.display()), e))?;
    for (i, task) in stream.tasks.iter().enumerate() {
        let path = args.out.join(format!("task{}_{}.csv", i + 1, task.name));
        if path.exists() {
            return Err(Error::Config(format!("{} already exists", path.display())));
        }
        write_delimited(&path, task)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: usage: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Probe(a) => probe(a),
        Command::Metrics(a) => metrics(a),
        Command::GenData(a) => gen_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
