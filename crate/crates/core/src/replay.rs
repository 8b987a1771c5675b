//! Exemplar memory for rehearsal: K-means representatives per task and a
//! fixed-interval replay schedule.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TaskDataset;
use crate::error::{Error, Result};
use crate::model::Batch;
use crate::tensor::Tensor;

const MAX_LLOYD_ITERS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub features: Vec<f64>,
    pub label: usize,
    pub task_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    exemplars: Vec<Exemplar>,
    store_ratio: f64,
    replay_every: usize,
}

/// `max(1, floor(store_ratio × train_size))`.
pub fn exemplar_count(train_size: usize, store_ratio: f64) -> usize {
    ((train_size as f64 * store_ratio).floor() as usize).max(1)
}

/// True on every `replay_every`-th step, never on step 0.
pub fn replay_schedule(step_index: usize, replay_every: usize) -> bool {
    replay_every > 0 && step_index > 0 && step_index.is_multiple_of(replay_every)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's K-means with k-means++ seeding. Returns final centroids and assignments.
pub fn kmeans(points: &[&[f64]], k: usize, seed: u64) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    if points.is_empty() || k == 0 || k > points.len() {
        return Err(Error::InvalidArgument(format!(
            "k-means with k = {k} over {} points",
            points.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<Vec<f64>> = vec![points[rng.random_range(0..points.len())].to_vec()];
    while centroids.len() < k {
        let weights: Vec<f64> = points.iter().map(|p| nearest(p, &centroids).1).collect();
        let next = match WeightedIndex::new(&weights) {
            Ok(dist) => dist.sample(&mut rng),
            // Every point already coincides with a centroid.
            Err(_) => rng.random_range(0..points.len()),
        };
        centroids.push(points[next].to_vec());
    }
    let dim = points[0].len();
    let mut assign = vec![usize::MAX; points.len()];
    for _ in 0..MAX_LLOYD_ITERS {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let c = nearest(p, &centroids).0;
            if assign[i] != c {
                assign[i] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assign) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    Ok((centroids, assign))
}

/// Picks `k` representative rows (indices into `rows`): for every K-means
/// cluster, the member nearest its centroid. A cluster left empty takes the
/// nearest row not yet chosen. `k >= rows.len()` keeps everything.
pub fn select_exemplars(dataset: &TaskDataset, rows: &[usize], k: usize, seed: u64) -> Result<Vec<usize>> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument(format!("no rows to select from in `{}`", dataset.name)));
    }
    if k >= rows.len() {
        return Ok(rows.to_vec());
    }
    let points: Vec<&[f64]> = rows.iter().map(|&i| dataset.row(i)).collect();
    let (centroids, assign) = kmeans(&points, k, seed)?;
    let mut chosen = vec![false; rows.len()];
    let mut picks = Vec::with_capacity(k);
    for (c, centroid) in centroids.iter().enumerate() {
        let members = (0..rows.len()).filter(|&i| assign[i] == c);
        let pool: Vec<usize> = {
            let m: Vec<usize> = members.filter(|&i| !chosen[i]).collect();
            if m.is_empty() {
                (0..rows.len()).filter(|&i| !chosen[i]).collect()
            } else {
                m
            }
        };
        let mut best = pool[0];
        let mut best_d = sq_dist(points[best], centroid);
        for &i in &pool[1..] {
            let d = sq_dist(points[i], centroid);
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        chosen[best] = true;
        picks.push(rows[best]);
    }
    Ok(picks)
}

impl ReplayBuffer {
    pub fn new(store_ratio: f64, replay_every: usize) -> Result<Self> {
        if !(store_ratio > 0.0 && store_ratio <= 1.0) || replay_every == 0 {
            return Err(Error::InvalidArgument(format!(
                "store ratio {store_ratio} / replay interval {replay_every}"
            )));
        }
        Ok(ReplayBuffer {
            exemplars: Vec::new(),
            store_ratio,
            replay_every,
        })
    }

    pub fn len(&self) -> usize {
        self.exemplars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exemplars.is_empty()
    }

    pub fn exemplars(&self) -> &[Exemplar] {
        &self.exemplars
    }

    pub fn store_ratio(&self) -> f64 {
        self.store_ratio
    }

    pub fn replay_every(&self) -> usize {
        self.replay_every
    }

    pub fn task_count(&self, task_id: usize) -> usize {
        self.exemplars.iter().filter(|e| e.task_id == task_id).count()
    }

    /// Stores representatives of `dataset`'s training split.
    pub fn add_task(&mut self, dataset: &TaskDataset, seed: u64) -> Result<usize> {
        let rows = &dataset.splits.train;
        let k = exemplar_count(rows.len(), self.store_ratio);
        let picks = select_exemplars(dataset, rows, k, seed)?;
        for &i in &picks {
            self.exemplars.push(Exemplar {
                features: dataset.row(i).to_vec(),
                label: dataset.labels[i],
                task_id: dataset.task_id,
            });
        }
        Ok(picks.len())
    }

    pub(crate) fn from_exemplars(exemplars: Vec<Exemplar>, store_ratio: f64, replay_every: usize) -> Result<Self> {
        let mut b = Self::new(store_ratio, replay_every)?;
        b.exemplars = exemplars;
        Ok(b)
    }

    pub fn should_replay(&self, step_index: usize) -> bool {
        !self.is_empty() && replay_schedule(step_index, self.replay_every)
    }

    /// Draws `batch_size` exemplars uniformly with replacement and groups them
    /// into one batch per task, in task order.
    pub fn sample_replay_batch<R: Rng>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<Batch>> {
        if self.is_empty() || batch_size == 0 {
            return Ok(Vec::new());
        }
        let draws: Vec<usize> = (0..batch_size)
            .map(|_| rng.random_range(0..self.exemplars.len()))
            .collect();
        let mut tasks: Vec<usize> = draws.iter().map(|&i| self.exemplars[i].task_id).collect();
        tasks.sort_unstable();
        tasks.dedup();
        tasks
            .into_iter()
            .map(|t| {
                let picked: Vec<&Exemplar> = draws
                    .iter()
                    .map(|&i| &self.exemplars[i])
                    .filter(|e| e.task_id == t)
                    .collect();
                let dim = picked[0].features.len();
                let data = picked.iter().flat_map(|e| e.features.iter().copied()).collect();
                Batch::new(
                    Tensor::new(vec![picked.len(), dim], data)?,
                    picked.iter().map(|e| e.label).collect(),
                    t,
                )
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Splits;

    fn dataset(rows: Vec<Vec<f64>>) -> TaskDataset {
        let n = rows.len();
        TaskDataset::new(
            "t",
            0,
            Tensor::from_rows(&rows).unwrap(),
            vec![0; n],
            1,
            Splits {
                train: (0..n).collect(),
                val: vec![],
                test: vec![],
            },
        )
        .unwrap()
    }

    #[test]
    fn schedule_every_twentieth() {
        let hits: Vec<usize> = (1..=40).filter(|&s| replay_schedule(s, 20)).collect();
        assert_eq!(hits, vec![20, 40]);
        assert!(!replay_schedule(0, 20));
    }

    #[test]
    fn empty_buffer_never_replays() {
        let b = ReplayBuffer::new(0.01, 1).unwrap();
        assert!((0..100).all(|s| !b.should_replay(s)));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(b.sample_replay_batch(8, &mut rng).unwrap().is_empty());
    }

    #[test]
    fn k_equal_to_size_returns_everything() {
        let ds = dataset(vec![vec![0.0], vec![1.0], vec![5.0]]);
        assert_eq!(select_exemplars(&ds, &[0, 1, 2], 3, 1).unwrap(), vec![0, 1, 2]);
        assert_eq!(select_exemplars(&ds, &[0, 1, 2], 9, 1).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn two_separated_clouds_one_each() {
        let mut rows = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..40 {
            let c = if i % 2 == 0 { 10.0 } else { -10.0 };
            rows.push(vec![c + rng.random_range(-1.0..1.0), c + rng.random_range(-1.0..1.0)]);
        }
        let ds = dataset(rows);
        let all: Vec<usize> = (0..40).collect();
        for seed in 0..5 {
            let picks = select_exemplars(&ds, &all, 2, seed).unwrap();
            let signs: Vec<bool> = picks.iter().map(|&i| ds.row(i)[0] > 0.0).collect();
            assert_ne!(signs[0], signs[1], "seed {seed}: {picks:?}");
        }
    }

    #[test]
    fn counts_follow_store_ratio() {
        assert_eq!(exemplar_count(1000, 0.01), 10);
        assert_eq!(exemplar_count(50, 0.01), 1);
    }

    #[test]
    fn grouped_batches_by_task() {
        let mut ex = Vec::new();
        for i in 0..4 {
            ex.push(Exemplar {
                features: vec![i as f64],
                label: 0,
                task_id: i % 2,
            });
        }
        let b = ReplayBuffer::from_exemplars(ex, 0.1, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batches = b.sample_replay_batch(16, &mut rng).unwrap();
        assert_eq!(batches.iter().map(Batch::len).sum::<usize>(), 16);
        assert!(batches.windows(2).all(|w| w[0].task_id < w[1].task_id));
    }
}
