//! Task datasets, synthetic continual-learning streams and delimited file I/O.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, ParseErrorKind, Result};
use crate::model::Batch;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Splits {
    /// Shuffles `0..n` with `rng` and cuts it by `ratios` (train, val; test takes the rest).
    pub fn shuffled(n: usize, ratios: [f64; 3], rng: &mut ChaCha8Rng) -> Result<Self> {
        let total: f64 = ratios.iter().sum();
        if ratios.iter().any(|r| !(*r >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "split ratios {ratios:?} must be non-negative and sum to 1"
            )));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        let n_train = (n as f64 * ratios[0]).floor() as usize;
        let n_val = ((n as f64 * ratios[1]).floor() as usize).min(n - n_train);
        let test = idx.split_off(n_train + n_val);
        let val = idx.split_off(n_train);
        Ok(Splits {
            train: idx,
            val,
            test,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub name: String,
    pub task_id: usize,
    /// `[samples, dim]` row-major.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub splits: Splits,
}

impl TaskDataset {
    pub fn new(
        name: impl Into<String>,
        task_id: usize,
        features: Tensor,
        labels: Vec<usize>,
        class_count: usize,
        splits: Splits,
    ) -> Result<Self> {
        let ds = TaskDataset {
            name: name.into(),
            task_id,
            features,
            labels,
            class_count,
            splits,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        if self.features.shape().len() != 2 || self.features.rows() != self.labels.len() {
            return Err(Error::InvalidArgument(format!(
                "dataset `{}`: features {:?} vs {} labels",
                self.name,
                self.features.shape(),
                self.labels.len()
            )));
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= self.class_count) {
            return Err(Error::InvalidArgument(format!(
                "dataset `{}`: label {y} >= class count {}",
                self.name, self.class_count
            )));
        }
        let mut seen = vec![false; self.labels.len()];
        for &i in self
            .splits
            .train
            .iter()
            .chain(&self.splits.val)
            .chain(&self.splits.test)
        {
            if i >= seen.len() || seen[i] {
                return Err(Error::InvalidArgument(format!(
                    "dataset `{}`: splits overlap or index {i} out of range",
                    self.name
                )));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidArgument(format!(
                "dataset `{}`: splits do not cover every row",
                self.name
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn split(&self, which: Split) -> &[usize] {
        match which {
            Split::Train => &self.splits.train,
            Split::Val => &self.splits.val,
            Split::Test => &self.splits.test,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    /// Gathers the given rows into a batch routed to this task's head.
    pub fn batch(&self, rows: &[usize]) -> Result<Batch> {
        let d = self.dim();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &i in rows {
            data.extend_from_slice(self.row(i));
        }
        Batch::new(
            Tensor::new(vec![rows.len(), d], data)?,
            rows.iter().map(|&i| self.labels[i]).collect(),
            self.task_id,
        )
    }

    pub fn split_batch(&self, which: Split) -> Result<Batch> {
        self.batch(self.split(which))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub tasks: Vec<TaskDataset>,
    pub order_name: String,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.tasks.first().map_or(0, TaskDataset::dim)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.tasks.iter().map(|t| t.class_count).collect()
    }
}

/// Rotated-Gaussian benchmark: per-task class means rotated in the first two coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotatedGaussianSpec {
    pub n_tasks: usize,
    pub classes_per_task: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub separation: f64,
    /// Rotation between consecutive tasks, in degrees.
    pub rotation_deg: f64,
}

/// Permuted-feature benchmark built from a single rotated-Gaussian task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutedSpec {
    pub n_tasks: usize,
    pub classes_per_task: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub separation: f64,
}

const SPLIT_RATIOS: [f64; 3] = [0.6, 0.2, 0.2];

fn task_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Unit-norm class means: a regular simplex when it fits, else a circle in the first plane.
fn base_means(classes: usize, dim: usize) -> Vec<Vec<f64>> {
    if classes <= dim {
        let c = classes as f64;
        let scale = (c / (c - 1.0)).sqrt();
        (0..classes)
            .map(|k| {
                let mut m = vec![0.0; dim];
                for (j, v) in m.iter_mut().enumerate().take(classes) {
                    *v = scale * (if j == k { 1.0 } else { 0.0 } - 1.0 / c);
                }
                m
            })
            .collect()
    } else {
        (0..classes)
            .map(|k| {
                let angle = 2.0 * std::f64::consts::PI * k as f64 / classes as f64;
                let mut m = vec![0.0; dim];
                m[0] = angle.cos();
                m[1] = angle.sin();
                m
            })
            .collect()
    }
}

fn rotate_first_plane(v: &mut [f64], angle: f64) {
    let (s, c) = angle.sin_cos();
    let (x, y) = (v[0], v[1]);
    v[0] = c * x - s * y;
    v[1] = s * x + c * y;
}

fn gaussian_task(
    name: String,
    task_id: usize,
    means: &[Vec<f64>],
    samples_per_class: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TaskDataset> {
    let dim = means[0].len();
    let classes = means.len();
    let mut data = Vec::with_capacity(classes * samples_per_class * dim);
    let mut labels = Vec::with_capacity(classes * samples_per_class);
    for _ in 0..samples_per_class {
        for (k, mean) in means.iter().enumerate() {
            for &m in mean {
                let z: f64 = StandardNormal.sample(rng);
                data.push(m + z);
            }
            labels.push(k);
        }
    }
    let n = labels.len();
    let splits = Splits::shuffled(n, SPLIT_RATIOS, rng)?;
    TaskDataset::new(name, task_id, Tensor::new(vec![n, dim], data)?, labels, classes, splits)
}

fn check_gaussian_args(classes: usize, dim: usize, samples: usize, separation: f64) -> Result<()> {
    if dim < 2 {
        return Err(Error::InvalidArgument(format!("dim must be >= 2, got {dim}")));
    }
    if classes < 2 {
        return Err(Error::InvalidArgument(format!("need >= 2 classes, got {classes}")));
    }
    if samples == 0 {
        return Err(Error::InvalidArgument("samples_per_class must be >= 1".into()));
    }
    if !(separation > 0.0) {
        return Err(Error::InvalidArgument(format!("separation must be > 0, got {separation}")));
    }
    Ok(())
}

pub fn gen_rotated_gaussians(seed: u64, spec: &RotatedGaussianSpec) -> Result<TaskStream> {
    check_gaussian_args(spec.classes_per_task, spec.dim, spec.samples_per_class, spec.separation)?;
    if spec.n_tasks == 0 {
        return Err(Error::InvalidArgument("n_tasks must be >= 1".into()));
    }
    let base = base_means(spec.classes_per_task, spec.dim);
    let step = spec.rotation_deg.to_radians();
    let tasks = (0..spec.n_tasks)
        .map(|t| {
            let means: Vec<Vec<f64>> = base
                .iter()
                .map(|m| {
                    let mut m: Vec<f64> = m.iter().map(|v| v * spec.separation).collect();
                    rotate_first_plane(&mut m, t as f64 * step);
                    m
                })
                .collect();
            let mut rng = task_rng(seed, t as u64);
            gaussian_task(format!("rot{t}"), t, &means, spec.samples_per_class, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskStream {
        tasks,
        order_name: "identity".into(),
    })
}

/// Applies `perm` to every row: `out[j] = row[perm[j]]`.
pub fn permute_features(features: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let d = features.cols();
    if perm.len() != d {
        return Err(Error::Shape {
            op: "permute_features",
            detail: format!("permutation of length {} for {d} columns", perm.len()),
        });
    }
    let mut out = Vec::with_capacity(features.len());
    for i in 0..features.rows() {
        let row = features.row(i);
        out.extend(perm.iter().map(|&j| row[j]));
    }
    Tensor::new(features.shape().to_vec(), out)
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (j, &p) in perm.iter().enumerate() {
        inv[p] = j;
    }
    inv
}

pub fn gen_permuted_features(seed: u64, spec: &PermutedSpec) -> Result<TaskStream> {
    check_gaussian_args(spec.classes_per_task, spec.dim, spec.samples_per_class, spec.separation)?;
    if spec.n_tasks == 0 {
        return Err(Error::InvalidArgument("n_tasks must be >= 1".into()));
    }
    let means: Vec<Vec<f64>> = base_means(spec.classes_per_task, spec.dim)
        .into_iter()
        .map(|m| m.into_iter().map(|v| v * spec.separation).collect())
        .collect();
    let mut rng = task_rng(seed, 0);
    let base = gaussian_task("perm0".into(), 0, &means, spec.samples_per_class, &mut rng)?;
    let mut perm_rng = task_rng(seed, 1 << 32);
    let mut tasks = vec![base.clone()];
    for t in 1..spec.n_tasks {
        let mut perm: Vec<usize> = (0..spec.dim).collect();
        perm.shuffle(&mut perm_rng);
        let mut task = base.clone();
        task.name = format!("perm{t}");
        task.task_id = t;
        task.features = permute_features(&base.features, &perm)?;
        tasks.push(task);
    }
    Ok(TaskStream {
        tasks,
        order_name: "identity".into(),
    })
}

/// Reorders (or subsets) a stream. Task ids are reassigned in presented order.
pub fn make_order(stream: &TaskStream, permutation: &[usize], name: &str) -> Result<TaskStream> {
    if permutation.is_empty() {
        return Err(Error::InvalidArgument("empty task order".into()));
    }
    let mut used = vec![false; stream.len()];
    for &p in permutation {
        if p >= stream.len() || used[p] {
            return Err(Error::InvalidArgument(format!(
                "invalid task order {permutation:?} for {} tasks",
                stream.len()
            )));
        }
        used[p] = true;
    }
    let tasks = permutation
        .iter()
        .enumerate()
        .map(|(pos, &p)| {
            let mut t = stream.tasks[p].clone();
            t.task_id = pos;
            t
        })
        .collect();
    Ok(TaskStream {
        tasks,
        order_name: name.to_string(),
    })
}

/// How to read a delimited file into a [`TaskDataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelimitedSchema {
    pub has_header: bool,
    pub split_ratios: [f64; 3],
    pub seed: u64,
    pub task_id: usize,
    /// Inferred as `max(label) + 1` when absent.
    pub class_count: Option<usize>,
}

impl Default for DelimitedSchema {
    fn default() -> Self {
        DelimitedSchema {
            has_header: false,
            split_ratios: SPLIT_RATIOS,
            seed: 0,
            task_id: 0,
            class_count: None,
        }
    }
}

/// Reads comma-separated rows of `d` feature columns followed by an integer label.
/// Lines starting with `#` and blank lines are skipped.
pub fn load_delimited(path: &Path, schema: &DelimitedSchema) -> Result<TaskDataset> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let parse_err = |line: usize, kind: ParseErrorKind| Error::Parse {
        path: path.to_path_buf(),
        line,
        kind,
    };
    let mut header_pending = schema.has_header;
    let mut width = None;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut last_line = 0;
    for (lineno, line) in text.lines().enumerate().map(|(i, l)| (i + 1, l)) {
        last_line = lineno;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if header_pending {
            header_pending = false;
            continue;
        }
        let cells: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        let expected = *width.get_or_insert(cells.len());
        if cells.len() != expected || expected < 2 {
            return Err(parse_err(
                lineno,
                ParseErrorKind::Ragged {
                    expected: expected.max(2),
                    found: cells.len(),
                },
            ));
        }
        let (label_cell, feature_cells) = cells.split_last().expect("at least two cells");
        for (col, cell) in feature_cells.iter().enumerate() {
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => data.push(v),
                _ => {
                    return Err(parse_err(
                        lineno,
                        ParseErrorKind::NonNumeric {
                            column: col + 1,
                            cell: cell.to_string(),
                        },
                    ))
                }
            }
        }
        let label = label_cell.parse::<usize>().map_err(|_| {
            parse_err(
                lineno,
                ParseErrorKind::BadLabel {
                    cell: label_cell.to_string(),
                },
            )
        })?;
        labels.push(label);
    }
    let Some(width) = width else {
        return Err(parse_err(last_line.max(1), ParseErrorKind::Empty));
    };
    let n = labels.len();
    let class_count = schema
        .class_count
        .unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let mut rng = task_rng(schema.seed, schema.task_id as u64);
    let splits = Splits::shuffled(n, schema.split_ratios, &mut rng)?;
    let name = path
        .file_stem()
        .map_or_else(|| "task".to_string(), |s| s.to_string_lossy().into_owned());
    TaskDataset::new(
        name,
        schema.task_id,
        Tensor::new(vec![n, width - 1], data)?,
        labels,
        class_count,
        splits,
    )
}

/// Writes every row of `dataset` with shortest round-trip float formatting.
pub fn write_delimited(path: &Path, dataset: &TaskDataset) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "# {} ({} rows, {} features)", dataset.name, dataset.len(), dataset.dim());
    for i in 0..dataset.len() {
        for v in dataset.row(i) {
            let _ = write!(out, "{v:?},");
        }
        let _ = writeln!(out, "{}", dataset.labels[i]);
    }
    std::fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rot_spec(rotation_deg: f64) -> RotatedGaussianSpec {
        RotatedGaussianSpec {
            n_tasks: 3,
            classes_per_task: 3,
            dim: 4,
            samples_per_class: 20,
            separation: 3.0,
            rotation_deg,
        }
    }

    #[test]
    fn same_seed_same_stream() {
        let a = gen_rotated_gaussians(7, &rot_spec(30.0)).unwrap();
        let b = gen_rotated_gaussians(7, &rot_spec(30.0)).unwrap();
        assert_eq!(a, b);
        let c = gen_rotated_gaussians(8, &rot_spec(30.0)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_rotation_gives_identically_distributed_tasks() {
        let spec = RotatedGaussianSpec {
            samples_per_class: 400,
            ..rot_spec(0.0)
        };
        let s = gen_rotated_gaussians(1, &spec).unwrap();
        // Per-class sample means agree across tasks to within sampling noise.
        let class_mean = |t: &TaskDataset, k: usize| -> Vec<f64> {
            let rows: Vec<usize> = (0..t.len()).filter(|&i| t.labels[i] == k).collect();
            (0..t.dim())
                .map(|j| rows.iter().map(|&i| t.row(i)[j]).sum::<f64>() / rows.len() as f64)
                .collect()
        };
        for k in 0..3 {
            let m0 = class_mean(&s.tasks[0], k);
            for t in &s.tasks[1..] {
                let m = class_mean(t, k);
                for (a, b) in m0.iter().zip(&m) {
                    assert!((a - b).abs() < 0.5, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn splits_are_disjoint_and_sized() {
        let s = gen_rotated_gaussians(3, &rot_spec(45.0)).unwrap();
        let t = &s.tasks[0];
        assert_eq!(t.len(), 60);
        assert_eq!(t.splits.train.len(), 36);
        assert_eq!(t.splits.val.len(), 12);
        assert_eq!(t.splits.test.len(), 12);
    }

    #[test]
    fn degenerate_dims_rejected() {
        let mut spec = rot_spec(10.0);
        spec.dim = 1;
        assert!(gen_rotated_gaussians(0, &spec).is_err());
        spec.dim = 3;
        spec.separation = 0.0;
        assert!(gen_rotated_gaussians(0, &spec).is_err());
    }

    #[test]
    fn permuted_first_task_is_base_and_inverse_restores() {
        let spec = PermutedSpec {
            n_tasks: 4,
            classes_per_task: 3,
            dim: 6,
            samples_per_class: 10,
            separation: 4.0,
        };
        let s = gen_permuted_features(5, &spec).unwrap();
        let perm: Vec<usize> = vec![3, 1, 5, 0, 2, 4];
        let forward = permute_features(&s.tasks[0].features, &perm).unwrap();
        let back = permute_features(&forward, &invert_permutation(&perm)).unwrap();
        assert_eq!(back, s.tasks[0].features);
        for t in &s.tasks[1..] {
            assert_eq!(t.labels, s.tasks[0].labels);
        }
        let base = {
            let mut rng = task_rng(5, 0);
            let means: Vec<Vec<f64>> = base_means(3, 6)
                .into_iter()
                .map(|m| m.into_iter().map(|v| v * 4.0).collect())
                .collect();
            gaussian_task("perm0".into(), 0, &means, 10, &mut rng).unwrap()
        };
        assert_eq!(s.tasks[0], base);
    }

    #[test]
    fn order_subset_and_identity() {
        let spec = RotatedGaussianSpec {
            n_tasks: 5,
            ..rot_spec(20.0)
        };
        let s = gen_rotated_gaussians(2, &spec).unwrap();
        let same = make_order(&s, &[0, 1, 2, 3, 4], "identity").unwrap();
        assert_eq!(same.tasks, s.tasks);
        let sub = make_order(&s, &[2, 0, 1], "sub").unwrap();
        assert_eq!(sub.len(), 3);
        assert_eq!(sub.tasks[0].name, "rot2");
        assert_eq!(
            sub.tasks.iter().map(|t| t.task_id).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
        let other = make_order(&s, &[1, 2, 0], "other").unwrap();
        let mut a: Vec<_> = sub.tasks.iter().map(|t| t.name.clone()).collect();
        let mut b: Vec<_> = other.tasks.iter().map(|t| t.name.clone()).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
        assert!(make_order(&s, &[0, 0], "dup").is_err());
        assert!(make_order(&s, &[7], "oob").is_err());
    }
}
