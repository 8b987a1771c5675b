//! Continual-learning scores over the lower-triangular accuracy matrix, and
//! the jointly trained reference model.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Split, TaskStream};
use crate::error::{Error, Result};
use crate::flat_optim::{base_step, derive_seed, evaluate_union, OptimizerConfig, OptimizerState};
use crate::model::{ModelSpec, MultiHeadClassifier};

/// `a[l][j]`: accuracy on task `j`'s test set after training through task `l`
/// (`j ≤ l`, zero-based).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

fn check_accuracy(v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("accuracy {v} outside [0, 1]")))
    }
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = AccuracyMatrix::new();
        for row in rows {
            m.push_row(row)?;
        }
        Ok(m)
    }

    /// Appends the row for the next task; it must hold one entry per seen task.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(Error::InvalidArgument(format!(
                "row {} needs {} entries, got {}",
                self.rows.len() + 1,
                self.rows.len() + 1,
                row.len()
            )));
        }
        for &v in &row {
            check_accuracy(v)?;
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn task_count(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn get(&self, l: usize, j: usize) -> Option<f64> {
        self.rows.get(l).and_then(|r| r.get(j)).copied()
    }

    pub fn last_row(&self) -> Option<&[f64]> {
        self.rows.last().map(Vec::as_slice)
    }

    pub fn to_csv_string(&self) -> String {
        let t = self.rows.len();
        let mut out = String::from("trained_through");
        for j in 1..=t {
            out.push_str(&format!(",task{j}"));
        }
        out.push('\n');
        for (l, row) in self.rows.iter().enumerate() {
            out.push_str(&(l + 1).to_string());
            for j in 0..t {
                out.push(',');
                if let Some(v) = row.get(j) {
                    out.push_str(&v.to_string());
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::InvalidArgument(format!("accuracy matrix: {msg}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let width = header.split(',').count();
        if width < 2 || !header.starts_with("trained_through") {
            return Err(bad(format!("unexpected header {header:?}")));
        }
        let mut rows = Vec::new();
        for (l, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            if cells.len() != width {
                return Err(bad(format!("row {} has {} cells, expected {width}", l + 1, cells.len())));
            }
            let mut row = Vec::new();
            for (j, cell) in cells[1..].iter().enumerate() {
                match (j <= l, cell.is_empty()) {
                    (true, false) => row.push(
                        cell.parse::<f64>()
                            .map_err(|_| bad(format!("row {}: {cell:?} is not a number", l + 1)))?,
                    ),
                    (false, true) => {}
                    (true, true) => return Err(bad(format!("row {} is missing task {}", l + 1, j + 1))),
                    (false, false) => {
                        return Err(bad(format!("row {} has a value above the diagonal", l + 1)))
                    }
                }
            }
            rows.push(row);
        }
        if rows.len() != width - 1 {
            return Err(bad(format!("{} rows for {} tasks", rows.len(), width - 1)));
        }
        AccuracyMatrix::from_rows(rows)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_csv_str(&text)
    }
}

/// Per-task accuracies `a*` of a jointly trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceAccuracies {
    values: Vec<f64>,
}

impl ReferenceAccuracies {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        for &v in &values {
            check_accuracy(v)?;
        }
        Ok(ReferenceAccuracies { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Mean accuracy over all tasks after the last one.
pub fn avg_accuracy_after_last(matrix: &AccuracyMatrix) -> Result<f64> {
    let row = matrix
        .last_row()
        .ok_or_else(|| Error::InvalidArgument("empty accuracy matrix".into()))?;
    Ok(row.iter().sum::<f64>() / row.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intransigence {
    /// `I_k = a*_k − a_{k,k}`.
    pub per_task: Vec<f64>,
    pub mean: f64,
}

pub fn intransigence(matrix: &AccuracyMatrix, reference: &ReferenceAccuracies) -> Result<Intransigence> {
    let t = matrix.task_count();
    if t == 0 {
        return Err(Error::InvalidArgument("empty accuracy matrix".into()));
    }
    if reference.values.len() < t {
        return Err(Error::InvalidArgument(format!(
            "reference covers {} tasks, matrix has {t}",
            reference.values.len()
        )));
    }
    let per_task: Vec<f64> = (0..t).map(|k| reference.values[k] - matrix.rows[k][k]).collect();
    let mean = per_task.iter().sum::<f64>() / t as f64;
    Ok(Intransigence { per_task, mean })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forgetting {
    /// `F_k` for `k = 2..=T` (one-based), in order.
    pub per_step: Vec<f64>,
    pub mean: f64,
}

/// `f_j^k = max_{l<k} a_{l,j} − a_{k,j}`, averaged over `j < k` into `F_k`,
/// then over `k`. `None` for a single task.
pub fn forgetting(matrix: &AccuracyMatrix) -> Option<Forgetting> {
    let t = matrix.task_count();
    if t < 2 {
        return None;
    }
    let per_step: Vec<f64> = (1..t)
        .map(|k| {
            let total: f64 = (0..k)
                .map(|j| {
                    let best = (j..k).map(|l| matrix.rows[l][j]).fold(f64::NEG_INFINITY, f64::max);
                    best - matrix.rows[k][j]
                })
                .sum();
            total / k as f64
        })
        .collect();
    let mean = per_step.iter().sum::<f64>() / per_step.len() as f64;
    Some(Forgetting { per_step, mean })
}

/// Mean and sample standard deviation (`n − 1` denominator; `None` below two values).
pub fn mean_std(values: &[f64]) -> Option<(f64, Option<f64>)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() > 1)
        .then(|| (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt());
    Some((mean, std))
}

/// Trains one model on all tasks at once, cycling through the tasks' batches
/// round-robin, with the same number of epochs per task as a sequential run.
/// Returns each head's test accuracy.
pub fn train_multitask(
    stream: &TaskStream,
    spec: &ModelSpec,
    config: &OptimizerConfig,
    seed: u64,
) -> Result<(ReferenceAccuracies, MultiHeadClassifier)> {
    config.validate()?;
    if stream.is_empty() {
        return Err(Error::InvalidArgument("empty task stream".into()));
    }
    let classes = stream.class_counts();
    let mut model = MultiHeadClassifier::new(
        derive_seed(seed, "model", 0),
        stream.input_dim(),
        &spec.hidden_dims,
        &classes,
        spec.activation,
    )?;
    for &c in &classes[1..] {
        model.add_task_head(c)?;
    }
    let last = stream.len() - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "multitask", 0));
    let mut state = OptimizerState::new();
    let mut step = 0;
    let mut best: Option<(f64, crate::tensor::ParameterSet)> = None;
    let validate = |model: &MultiHeadClassifier, best: &mut Option<(f64, crate::tensor::ParameterSet)>| {
        let acc = evaluate_union(model, stream, last, Split::Val)?;
        if best.as_ref().is_none_or(|(b, _)| acc > *b) {
            *best = Some((acc, model.params().clone()));
        }
        Ok::<_, Error>(())
    };
    let mut validated_at = None;
    for _ in 0..config.epochs {
        let mut queues: Vec<Vec<Vec<usize>>> = stream
            .tasks
            .iter()
            .map(|task| {
                let mut order = task.splits.train.clone();
                order.shuffle(&mut rng);
                let mut chunks: Vec<Vec<usize>> = order.chunks(config.batch_size).map(<[usize]>::to_vec).collect();
                chunks.reverse();
                chunks
            })
            .collect();
        while queues.iter().any(|q| !q.is_empty()) {
            for (t, queue) in queues.iter_mut().enumerate() {
                let Some(rows) = queue.pop() else { continue };
                let batch = stream.tasks[t].batch(&rows)?;
                let (_, grads) = model
                    .loss_and_grad(std::slice::from_ref(&batch))
                    .map_err(|e| e.at_step(t, step + 1))?;
                base_step(&mut state, model.params_mut(), &grads, None, config).map_err(|e| e.at_step(t, step + 1))?;
                step += 1;
                if step % config.validate_every_steps == 0 {
                    validate(&model, &mut best)?;
                    validated_at = Some(step);
                }
            }
        }
    }
    if validated_at != Some(step) {
        validate(&model, &mut best)?;
    }
    if let Some((_, params)) = best {
        model.params_mut().copy_from(&params)?;
    }
    let mut values = Vec::with_capacity(stream.len());
    for task in &stream.tasks {
        values.push(model.accuracy(&task.split_batch(Split::Test)?)?);
    }
    Ok((ReferenceAccuracies::new(values)?, model))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three_by_three() -> AccuracyMatrix {
        AccuracyMatrix::from_rows(vec![vec![0.9], vec![0.7, 0.8], vec![0.6, 0.75, 0.85]]).unwrap()
    }

    #[test]
    fn average_after_last() {
        let m = AccuracyMatrix::from_rows(vec![vec![0.9], vec![0.8, 0.6]]).unwrap();
        assert!((avg_accuracy_after_last(&m).unwrap() - 0.7).abs() < 1e-15);
        let one = AccuracyMatrix::from_rows(vec![vec![0.9]]).unwrap();
        assert_eq!(avg_accuracy_after_last(&one).unwrap(), 0.9);
    }

    #[test]
    fn forgetting_hand_example() {
        let f = forgetting(&three_by_three()).unwrap();
        assert!((f.per_step[0] - 0.2).abs() < 1e-12);
        assert!((f.per_step[1] - 0.175).abs() < 1e-12);
        assert!(forgetting(&AccuracyMatrix::from_rows(vec![vec![0.5]]).unwrap()).is_none());
    }

    #[test]
    fn non_regressing_columns_do_not_forget() {
        let m = AccuracyMatrix::from_rows(vec![vec![0.5], vec![0.6, 0.7], vec![0.6, 0.8, 0.9]]).unwrap();
        assert!(forgetting(&m).unwrap().mean <= 0.0);
    }

    #[test]
    fn intransigence_substitution() {
        let m = AccuracyMatrix::from_rows(vec![vec![0.85]]).unwrap();
        let r = ReferenceAccuracies::new(vec![0.9]).unwrap();
        assert!((intransigence(&m, &r).unwrap().mean - 0.05).abs() < 1e-12);
        let better = ReferenceAccuracies::new(vec![0.8]).unwrap();
        assert!(intransigence(&m, &better).unwrap().mean < 0.0);
    }

    #[test]
    fn csv_round_trip() {
        let m = three_by_three();
        let text = m.to_csv_string();
        assert!(text.starts_with("trained_through,task1,task2,task3\n1,0.9,,\n"));
        assert_eq!(AccuracyMatrix::from_csv_str(&text).unwrap(), m);
    }

    #[test]
    fn csv_rejects_upper_triangle() {
        assert!(AccuracyMatrix::from_csv_str("trained_through,task1,task2\n1,0.9,0.1\n2,0.8,0.7\n").is_err());
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(m, 2.0);
        assert_eq!(s, Some(1.0));
        assert_eq!(mean_std(&[4.0]).unwrap().1, None);
    }
}
