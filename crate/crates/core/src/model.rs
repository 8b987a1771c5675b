//! Multi-head MLP classifier: a shared encoder with one linear head per task.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BoundParams, Graph, Var};
use crate::error::{Error, Result};
use crate::objective::Objective;
use crate::tensor::{ParameterSet, Tensor};

/// Features and labels routed to a single task head.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub task_id: usize,
}

impl Batch {
    pub fn new(features: Tensor, labels: Vec<usize>, task_id: usize) -> Result<Self> {
        if labels.is_empty() || features.shape().len() != 2 || features.rows() != labels.len() {
            return Err(Error::Shape {
                op: "batch",
                detail: format!("features {:?} with {} labels", features.shape(), labels.len()),
            });
        }
        Ok(Batch {
            features,
            labels,
            task_id,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The `i`-th sample as a batch of one.
    pub fn sample(&self, i: usize) -> Batch {
        Batch {
            features: Tensor::new(vec![1, self.features.cols()], self.features.row(i).to_vec())
                .expect("row shape"),
            labels: vec![self.labels[i]],
            task_id: self.task_id,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

/// Encoder shape chosen by a benchmark configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            hidden_dims: vec![64],
            activation: Activation::Relu,
        }
    }
}

/// Topology needed to rebuild a classifier around a stored parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub seed: u64,
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    pub head_classes: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct MultiHeadClassifier {
    topology: Topology,
    params: ParameterSet,
}

pub fn encoder_weight(layer: usize) -> String {
    format!("encoder.{layer}.weight")
}

pub fn encoder_bias(layer: usize) -> String {
    format!("encoder.{layer}.bias")
}

pub fn head_weight(task: usize) -> String {
    format!("head.{task}.weight")
}

pub fn head_bias(task: usize) -> String {
    format!("head.{task}.bias")
}

pub fn is_encoder_param(name: &str) -> bool {
    name.starts_with("encoder.")
}

/// Task index of a head parameter, `None` for encoder parameters.
pub fn head_of(name: &str) -> Option<usize> {
    name.strip_prefix("head.")?.split('.').next()?.parse().ok()
}

/// Uniform `±1/sqrt(fan_in)` initialization for a `fan_in × fan_out` layer.
fn init_linear(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> (Tensor, Tensor) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    let b = (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect();
    (
        Tensor::new(vec![fan_in, fan_out], w).expect("weight shape"),
        Tensor::vector(b),
    )
}

impl MultiHeadClassifier {
    /// Builds the encoder and the head for the first task. `per_task_classes[0]`
    /// sizes that head; later heads come from [`Self::add_task_head`].
    pub fn new(
        seed: u64,
        input_dim: usize,
        hidden_dims: &[usize],
        per_task_classes: &[usize],
        activation: Activation,
    ) -> Result<Self> {
        if input_dim == 0 || hidden_dims.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "layer sizes must be >= 1 (input {input_dim}, hidden {hidden_dims:?})"
            )));
        }
        let Some(&first) = per_task_classes.first() else {
            return Err(Error::InvalidArgument("no task class counts given".into()));
        };
        if per_task_classes.contains(&0) {
            return Err(Error::InvalidArgument("class count must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        let mut fan_in = input_dim;
        for (l, &h) in hidden_dims.iter().enumerate() {
            let (w, b) = init_linear(&mut rng, fan_in, h);
            params.push(encoder_weight(l), w)?;
            params.push(encoder_bias(l), b)?;
            fan_in = h;
        }
        let mut model = MultiHeadClassifier {
            topology: Topology {
                seed,
                input_dim,
                hidden_dims: hidden_dims.to_vec(),
                activation,
                head_classes: Vec::new(),
            },
            params,
        };
        model.add_task_head(first)?;
        Ok(model)
    }

    /// Rebuilds a classifier from a topology and matching parameters.
    pub fn from_parts(topology: Topology, params: ParameterSet) -> Result<Self> {
        let classes = topology.head_classes.clone();
        let mut shell = MultiHeadClassifier::new(
            topology.seed,
            topology.input_dim,
            &topology.hidden_dims,
            &classes,
            topology.activation,
        )?;
        for &c in &classes[1..] {
            shell.add_task_head(c)?;
        }
        shell.params.check_aligned(&params)?;
        shell.params = params;
        Ok(shell)
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn head_count(&self) -> usize {
        self.topology.head_classes.len()
    }

    pub fn class_count(&self, task: usize) -> Option<usize> {
        self.topology.head_classes.get(task).copied()
    }

    fn feature_dim(&self) -> usize {
        self.topology
            .hidden_dims
            .last()
            .copied()
            .unwrap_or(self.topology.input_dim)
    }

    /// Appends a freshly initialized head; its weights depend only on the
    /// model seed and the head index.
    pub fn add_task_head(&mut self, class_count: usize) -> Result<usize> {
        if class_count == 0 {
            return Err(Error::InvalidArgument("class count must be >= 1".into()));
        }
        let task = self.head_count();
        let mut rng = ChaCha8Rng::seed_from_u64(self.topology.seed);
        rng.set_stream(task as u64 + 1);
        let (w, b) = init_linear(&mut rng, self.feature_dim(), class_count);
        self.params.push(head_weight(task), w)?;
        self.params.push(head_bias(task), b)?;
        self.topology.head_classes.push(class_count);
        Ok(task)
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let classes = self
            .class_count(batch.task_id)
            .ok_or(Error::MissingHead(batch.task_id))?;
        if batch.features.cols() != self.topology.input_dim {
            return Err(Error::Shape {
                op: "forward",
                detail: format!(
                    "batch with {} features for input dim {}",
                    batch.features.cols(),
                    self.topology.input_dim
                ),
            });
        }
        if let Some(&y) = batch.labels.iter().find(|&&y| y >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {y} for task {} with {classes} classes",
                batch.task_id
            )));
        }
        Ok(())
    }

    fn logits_var(&self, g: &mut Graph, bound: &BoundParams, x: Var, task: usize) -> Result<Var> {
        let var = |name: String| bound.var(&name).ok_or(Error::Detached(name));
        let mut h = x;
        for l in 0..self.topology.hidden_dims.len() {
            let z = g.matmul(h, var(encoder_weight(l))?)?;
            let z = g.add(z, var(encoder_bias(l))?)?;
            h = match self.topology.activation {
                Activation::Relu => g.relu(z),
                Activation::Tanh => g.tanh(z),
            };
        }
        let z = g.matmul(h, var(head_weight(task))?)?;
        g.add(z, var(head_bias(task))?)
    }

    /// Loss over several head-specific batches: each batch's mean cross-entropy
    /// weighted by its share of the samples. Returns the graph for the caller
    /// to differentiate.
    fn loss_graph(&self, batches: &[Batch]) -> Result<(Graph, BoundParams, Var)> {
        if batches.is_empty() {
            return Err(Error::InvalidArgument("loss over zero batches".into()));
        }
        let total: usize = batches.iter().map(Batch::len).sum();
        let mut g = Graph::new();
        let bound = g.bind(&self.params);
        let mut loss: Option<Var> = None;
        for batch in batches {
            self.check_batch(batch)?;
            let x = g.constant(batch.features.clone());
            let logits = self.logits_var(&mut g, &bound, x, batch.task_id)?;
            let mut l = g.cross_entropy(logits, &batch.labels)?;
            if batches.len() > 1 {
                l = g.scale(l, batch.len() as f64 / total as f64);
            }
            loss = Some(match loss {
                None => l,
                Some(acc) => g.add(acc, l)?,
            });
        }
        Ok((g, bound, loss.expect("non-empty")))
    }

    /// Mean cross-entropy of `batch` through head `batch.task_id`.
    pub fn task_loss(&self, batch: &Batch) -> Result<f64> {
        self.loss_over(std::slice::from_ref(batch))
    }

    pub fn loss_over(&self, batches: &[Batch]) -> Result<f64> {
        let (g, _, loss) = self.loss_graph(batches)?;
        Ok(g.value(loss).item().expect("scalar loss"))
    }

    pub fn loss_and_grad(&self, batches: &[Batch]) -> Result<(f64, ParameterSet)> {
        let (g, bound, loss) = self.loss_graph(batches)?;
        let value = g.value(loss).item().expect("scalar loss");
        if !value.is_finite() {
            return Err(Error::NonFinite("task loss".into()));
        }
        Ok((value, g.gradient(loss, &bound)?))
    }

    /// Gradient of `log p(y | x; w)` for the sample's true label.
    pub fn log_prob_gradient(&self, sample: &Batch) -> Result<ParameterSet> {
        if sample.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "log_prob_gradient needs one sample, got {}",
                sample.len()
            )));
        }
        let (_, mut grads) = self.loss_and_grad(std::slice::from_ref(sample))?;
        grads.scale(-1.0);
        Ok(grads)
    }

    pub fn logits(&self, features: &Tensor, task: usize) -> Result<Tensor> {
        if task >= self.head_count() {
            return Err(Error::MissingHead(task));
        }
        let mut g = Graph::new();
        // Constants only: nothing is recorded for the reverse pass.
        let bound = g.bind_constants(&self.params);
        let x = g.constant(features.clone());
        let out = self.logits_var(&mut g, &bound, x, task)?;
        Ok(g.value(out).clone())
    }

    /// Argmax class per row; ties go to the lowest class index.
    pub fn predict(&self, features: &Tensor, task: usize) -> Result<Vec<usize>> {
        let logits = self.logits(features, task)?;
        Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
    }

    pub fn accuracy(&self, batch: &Batch) -> Result<f64> {
        let predicted = self.predict(&batch.features, batch.task_id)?;
        let correct = predicted
            .iter()
            .zip(&batch.labels)
            .filter(|(p, y)| p == y)
            .count();
        Ok(correct as f64 / batch.len() as f64)
    }

    /// Correct predictions and sample count.
    pub fn correct_count(&self, batch: &Batch) -> Result<(usize, usize)> {
        let predicted = self.predict(&batch.features, batch.task_id)?;
        let correct = predicted
            .iter()
            .zip(&batch.labels)
            .filter(|(p, y)| p == y)
            .count();
        Ok((correct, batch.len()))
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// A classifier paired with the batches its loss is evaluated on.
pub struct ModelObjective<'a> {
    pub model: &'a mut MultiHeadClassifier,
    pub batches: &'a [Batch],
}

impl<'a> ModelObjective<'a> {
    pub fn new(model: &'a mut MultiHeadClassifier, batches: &'a [Batch]) -> Self {
        ModelObjective { model, batches }
    }
}

impl Objective for ModelObjective<'_> {
    fn params(&self) -> &ParameterSet {
        &self.model.params
    }

    fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.model.params
    }

    fn loss(&self) -> Result<f64> {
        self.model.loss_over(self.batches)
    }

    fn loss_and_grad(&self) -> Result<(f64, ParameterSet)> {
        self.model.loss_and_grad(self.batches)
    }
}
