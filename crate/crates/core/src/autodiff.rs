//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is the computation record: every operation appends a node
//! whose inputs already exist, so node order is a topological order and the
//! reverse pass is a single backwards sweep. Operations whose inputs do not
//! require gradients are evaluated but carry no backward rule.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{ParameterSet, Tensor};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of a specific [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    index: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add { lhs: Var, rhs: Var, broadcast: bool },
    Mul { lhs: Var, rhs: Var, broadcast: bool },
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Square(Var),
    ReduceMean(Var),
    Sum(Var),
    LogSoftmax(Var),
    NllLoss { log_probs: Var, labels: Vec<usize> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Parameters registered as differentiable leaves, in [`ParameterSet`] order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    graph: u64,
    entries: Vec<(String, Var)>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Option<Var> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn node(&self, v: Var) -> &Node {
        assert_eq!(v.graph, self.id, "variable used with a foreign graph");
        &self.nodes[v.index]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers every tensor of `params` as a differentiable leaf.
    pub fn bind(&mut self, params: &ParameterSet) -> BoundParams {
        let entries = params
            .iter()
            .map(|e| (e.name.clone(), self.leaf(e.tensor.clone())))
            .collect();
        BoundParams {
            graph: self.id,
            entries,
        }
    }

    /// Same as [`Self::bind`] but the leaves do not require gradients.
    pub fn bind_constants(&mut self, params: &ParameterSet) -> BoundParams {
        let entries = params
            .iter()
            .map(|e| (e.name.clone(), self.constant(e.tensor.clone())))
            .collect();
        BoundParams {
            graph: self.id,
            entries,
        }
    }

    fn shapes(&self, vars: &[Var]) -> String {
        vars.iter()
            .map(|&v| format!("{:?}", self.value(v).shape()))
            .collect::<Vec<_>>()
            .join(" x ")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::Shape {
                op: "matmul",
                detail: self.shapes(&[a, b]),
            });
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let (ad, bd) = (av.data(), bv.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = ad[i * k + p];
                let brow = &bd[p * n..(p + 1) * n];
                for j in 0..n {
                    row[j] += aip * brow[j];
                }
            }
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Returns whether `rhs` must be broadcast over the leading dimension of `lhs`.
    fn broadcast_rule(&self, op: &'static str, lhs: Var, rhs: Var) -> Result<bool> {
        let (ls, rs) = (self.value(lhs).shape(), self.value(rhs).shape());
        if ls == rs {
            return Ok(false);
        }
        let tail = if ls.is_empty() { &[][..] } else { &ls[1..] };
        let row_like = rs == tail || (rs.len() == ls.len() && rs[0] == 1 && &rs[1..] == tail);
        if row_like && !ls.is_empty() {
            Ok(true)
        } else {
            Err(Error::Shape {
                op,
                detail: self.shapes(&[lhs, rhs]),
            })
        }
    }

    fn binary(
        &mut self,
        op: &'static str,
        lhs: Var,
        rhs: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool)> {
        let broadcast = self.broadcast_rule(op, lhs, rhs)?;
        let (lv, rv) = (self.value(lhs), self.value(rhs));
        let data = if broadcast {
            let cols = rv.len();
            lv.data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, rv.data()[i % cols]))
                .collect()
        } else {
            lv.data()
                .iter()
                .zip(rv.data())
                .map(|(&x, &y)| f(x, y))
                .collect()
        };
        Ok((Tensor::new(lv.shape().to_vec(), data)?, broadcast))
    }

    /// Elementwise sum; `rhs` may be a single row broadcast over the batch.
    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (value, broadcast) = self.binary("add", lhs, rhs, |x, y| x + y)?;
        let rg = self.requires_grad(lhs) || self.requires_grad(rhs);
        Ok(self.push(value, Op::Add { lhs, rhs, broadcast }, rg))
    }

    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (value, broadcast) = self.binary("elementwise_mul", lhs, rhs, |x, y| x * y)?;
        let rg = self.requires_grad(lhs) || self.requires_grad(rhs);
        Ok(self.push(value, Op::Mul { lhs, rhs, broadcast }, rg))
    }

    pub fn scale(&mut self, x: Var, alpha: f64) -> Var {
        let value = map_tensor(self.value(x), |v| alpha * v);
        let rg = self.requires_grad(x);
        self.push(value, Op::Scale(x, alpha), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = map_tensor(self.value(x), |v| if v > 0.0 { v } else { 0.0 });
        let rg = self.requires_grad(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = map_tensor(self.value(x), f64::tanh);
        let rg = self.requires_grad(x);
        self.push(value, Op::Tanh(x), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = map_tensor(self.value(x), |v| v * v);
        let rg = self.requires_grad(x);
        self.push(value, Op::Square(x), rg)
    }

    pub fn reduce_mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::Shape {
                op: "reduce_mean",
                detail: format!("{:?}", xv.shape()),
            });
        }
        let mean = xv.data().iter().sum::<f64>() / xv.len() as f64;
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::scalar(mean), Op::ReduceMean(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum::<f64>();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    fn check_matrix(&self, op: &'static str, x: Var) -> Result<(usize, usize)> {
        let s = self.value(x).shape();
        if s.len() != 2 || s[1] == 0 {
            return Err(Error::Shape {
                op,
                detail: format!("{s:?}"),
            });
        }
        Ok((s[0], s[1]))
    }

    fn check_labels(&self, op: &'static str, rows: usize, cols: usize, labels: &[usize]) -> Result<()> {
        if labels.len() != rows || rows == 0 {
            return Err(Error::Shape {
                op,
                detail: format!("{rows} rows with {} labels", labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= cols) {
            return Err(Error::Shape {
                op,
                detail: format!("label {bad} out of range for {cols} classes"),
            });
        }
        Ok(())
    }

    /// Row-wise log-softmax of a `[batch, classes]` matrix.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.check_matrix("log_softmax", x)?;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let row = xv.row(i);
            let lse = log_sum_exp(row);
            out.extend(row.iter().map(|&v| v - lse));
        }
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::new(vec![rows, cols], out)?, Op::LogSoftmax(x), rg))
    }

    /// Mean negative log-likelihood of `labels` under row-wise log-probabilities.
    pub fn nll_loss(&mut self, log_probs: Var, labels: &[usize]) -> Result<Var> {
        let (rows, cols) = self.check_matrix("nll_loss", log_probs)?;
        self.check_labels("nll_loss", rows, cols, labels)?;
        let lp = self.value(log_probs);
        let loss = -labels
            .iter()
            .enumerate()
            .map(|(i, &y)| lp.data()[i * cols + y])
            .sum::<f64>()
            / rows as f64;
        let rg = self.requires_grad(log_probs);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::NllLoss {
                log_probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Fused `nll_loss(log_softmax(logits), labels)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (rows, cols) = self.check_matrix("cross_entropy", logits)?;
        self.check_labels("cross_entropy", rows, cols, labels)?;
        let lv = self.value(logits);
        let mut probs = Vec::with_capacity(rows * cols);
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = lv.row(i);
            let lse = log_sum_exp(row);
            total += lse - row[y];
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let rg = self.requires_grad(logits);
        Ok(self.push(
            Tensor::scalar(total / rows as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`; returns gradients aligned with `params`.
    /// Consumes the record.
    pub fn gradient(self, loss: Var, params: &BoundParams) -> Result<ParameterSet> {
        if loss.graph != self.id || params.graph != self.id {
            let name = params
                .entries
                .first()
                .map_or_else(|| "<loss>".to_string(), |(n, _)| n.clone());
            return Err(Error::Detached(name));
        }
        let lv = &self.nodes[loss.index].value;
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let grads = self.backward(loss);
        let mut out = ParameterSet::new();
        for (name, var) in &params.entries {
            let value = &self.nodes[var.index].value;
            let data = grads[var.index]
                .clone()
                .unwrap_or_else(|| vec![0.0; value.len()]);
            out.push(name.clone(), Tensor::new(value.shape().to_vec(), data)?)?;
        }
        Ok(out)
    }

    fn backward(&self, loss: Var) -> Vec<Option<Vec<f64>>> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.index + 1];
        grads[loss.index] = Some(vec![1.0]);
        for idx in (0..=loss.index).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.propagate(node, &upstream, &mut grads);
            grads[idx] = Some(upstream);
        }
        grads
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], target: Var, contribution: Vec<f64>) {
        if !self.nodes[target.index].requires_grad {
            return;
        }
        match &mut grads[target.index] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&self, node: &Node, up: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.requires_grad(*a) {
                    // dA = dY · Bᵀ
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let brow = &bv.data()[p * n..(p + 1) * n];
                            let urow = &up[i * n..(i + 1) * n];
                            da[i * k + p] = urow.iter().zip(brow).map(|(u, b)| u * b).sum();
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    // dB = Aᵀ · dY
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = av.data()[i * k + p];
                            let urow = &up[i * n..(i + 1) * n];
                            let drow = &mut db[p * n..(p + 1) * n];
                            for j in 0..n {
                                drow[j] += aip * urow[j];
                            }
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add { lhs, rhs, broadcast } => {
                self.accumulate(grads, *lhs, up.to_vec());
                let g = if *broadcast {
                    reduce_rows(up, self.value(*rhs).len())
                } else {
                    up.to_vec()
                };
                self.accumulate(grads, *rhs, g);
            }
            Op::Mul { lhs, rhs, broadcast } => {
                let (lv, rv) = (self.value(*lhs).data(), self.value(*rhs).data());
                let cols = rv.len();
                let rhs_at = |i: usize| if *broadcast { rv[i % cols] } else { rv[i] };
                if self.requires_grad(*lhs) {
                    let g = up.iter().enumerate().map(|(i, u)| u * rhs_at(i)).collect();
                    self.accumulate(grads, *lhs, g);
                }
                if self.requires_grad(*rhs) {
                    let full: Vec<f64> = up.iter().zip(lv).map(|(u, l)| u * l).collect();
                    let g = if *broadcast { reduce_rows(&full, cols) } else { full };
                    self.accumulate(grads, *rhs, g);
                }
            }
            Op::Scale(x, alpha) => {
                self.accumulate(grads, *x, up.iter().map(|u| u * alpha).collect());
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let g = up
                    .iter()
                    .zip(xv)
                    .map(|(u, &v)| if v > 0.0 { *u } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, g);
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                let g = up.iter().zip(y).map(|(u, t)| u * (1.0 - t * t)).collect();
                self.accumulate(grads, *x, g);
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                let g = up.iter().zip(xv).map(|(u, v)| 2.0 * v * u).collect();
                self.accumulate(grads, *x, g);
            }
            Op::ReduceMean(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![up[0] / n as f64; n]);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![up[0]; n]);
            }
            Op::LogSoftmax(x) => {
                let y = &node.value;
                let (rows, cols) = (y.shape()[0], y.shape()[1]);
                let mut g = vec![0.0; rows * cols];
                for i in 0..rows {
                    let urow = &up[i * cols..(i + 1) * cols];
                    let total: f64 = urow.iter().sum();
                    for j in 0..cols {
                        g[i * cols + j] = urow[j] - y.data()[i * cols + j].exp() * total;
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::NllLoss { log_probs, labels } => {
                let cols = self.value(*log_probs).shape()[1];
                let mut g = vec![0.0; labels.len() * cols];
                let scale = -up[0] / labels.len() as f64;
                for (i, &y) in labels.iter().enumerate() {
                    g[i * cols + y] = scale;
                }
                self.accumulate(grads, *log_probs, g);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let cols = self.value(*logits).shape()[1];
                let scale = up[0] / labels.len() as f64;
                let mut g: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &y) in labels.iter().enumerate() {
                    g[i * cols + y] -= scale;
                }
                self.accumulate(grads, *logits, g);
            }
        }
    }
}

fn map_tensor(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
        .expect("shape preserved")
}

fn reduce_rows(full: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (i, v) in full.iter().enumerate() {
        out[i % cols] += v;
    }
    out
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Central-difference gradient `(f(w + h e_i) - f(w - h e_i)) / 2h` per coordinate.
pub fn finite_diff_gradient<F>(mut loss_fn: F, params: &ParameterSet, h: f64) -> Result<ParameterSet>
where
    F: FnMut(&ParameterSet) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step h must be positive, got {h}")));
    }
    let mut probe = params.clone();
    let mut grads = params.zeros_like();
    for t in 0..params.len() {
        for i in 0..params.entry(t).tensor.len() {
            let original = probe.entry(t).tensor.data()[i];
            probe.entry_mut(t).tensor.data_mut()[i] = original + h;
            let plus = loss_fn(&probe)?;
            probe.entry_mut(t).tensor.data_mut()[i] = original - h;
            let minus = loss_fn(&probe)?;
            probe.entry_mut(t).tensor.data_mut()[i] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "finite difference of `{}`[{i}]",
                    params.entry(t).name
                )));
            }
            grads.entry_mut(t).tensor.data_mut()[i] = (plus - minus) / (2.0 * h);
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, t: Tensor) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.push(name, t).unwrap();
        p
    }

    #[test]
    fn matmul_small() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let b = g.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
        assert_eq!(g.value(c).shape(), &[1, 1]);
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn log_softmax_symmetric() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap());
        let y = g.log_softmax(x).unwrap();
        let ln2 = std::f64::consts::LN_2;
        for v in g.value(y).data() {
            assert!((v + ln2).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = g.constant(Tensor::zeros(&[4]));
        let err = g.add(a, c).unwrap_err().to_string();
        assert!(err.contains("add"), "{err}");
    }

    #[test]
    fn square_mean_gradient() {
        let params = single("w", Tensor::vector(vec![3.0]));
        let mut g = Graph::new();
        let bound = g.bind(&params);
        let w = bound.var("w").unwrap();
        let sq = g.square(w);
        let loss = g.reduce_mean(sq).unwrap();
        let grads = g.gradient(loss, &bound).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[6.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let params = single("w", Tensor::vector(vec![1.0, -2.0]));
        let mut g = Graph::new();
        let bound = g.bind(&params);
        let c = g.constant(Tensor::scalar(4.0));
        let loss = g.scale(c, 2.0);
        let grads = g.gradient(loss, &bound).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let params = single("w", Tensor::vector(vec![1.0, 2.0]));
        let mut g = Graph::new();
        let bound = g.bind(&params);
        let w = bound.var("w").unwrap();
        let y = g.square(w);
        assert!(matches!(g.gradient(y, &bound), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn detached_params_rejected() {
        let params = single("w", Tensor::vector(vec![1.0]));
        let mut other = Graph::new();
        let foreign = other.bind(&params);
        let mut g = Graph::new();
        let bound = g.bind(&params);
        let w = bound.var("w").unwrap();
        let loss = g.sum(w);
        assert!(matches!(g.gradient(loss, &foreign), Err(Error::Detached(_))));
    }

    #[test]
    fn central_difference_exact_on_quadratic() {
        let params = single("w", Tensor::vector(vec![1.0]));
        let g = finite_diff_gradient(|p| Ok(p.get("w").unwrap().data()[0].powi(2)), &params, 1e-5)
            .unwrap();
        assert!((g.get("w").unwrap().data()[0] - 2.0).abs() < 1e-9);
        let z = finite_diff_gradient(|_| Ok(3.0), &params, 1e-5).unwrap();
        assert_eq!(z.get("w").unwrap().data()[0], 0.0);
    }

    #[test]
    fn finite_diff_rejects_nonfinite() {
        let params = single("w", Tensor::vector(vec![1.0]));
        assert!(finite_diff_gradient(|_| Ok(f64::NAN), &params, 1e-5).is_err());
        assert!(finite_diff_gradient(|_| Ok(1.0), &params, 0.0).is_err());
    }

    #[test]
    fn broadcast_add_and_mul_gradients_match_fd() {
        let mut params = ParameterSet::new();
        params
            .push("x", Tensor::new(vec![3, 2], vec![0.3, -1.2, 0.7, 0.1, -0.4, 2.0]).unwrap())
            .unwrap();
        params.push("b", Tensor::vector(vec![0.5, -0.25])).unwrap();
        params.push("s", Tensor::new(vec![1, 2], vec![1.5, -0.7]).unwrap()).unwrap();
        let build = |p: &ParameterSet| -> Result<(Graph, BoundParams, Var)> {
            let mut g = Graph::new();
            let bound = g.bind(p);
            let (x, b, s) = (
                bound.var("x").unwrap(),
                bound.var("b").unwrap(),
                bound.var("s").unwrap(),
            );
            let y = g.add(x, b)?;
            let y = g.mul(y, s)?;
            let y = g.tanh(y);
            let y = g.square(y);
            let loss = g.reduce_mean(y)?;
            Ok((g, bound, loss))
        };
        let (g, bound, loss) = build(&params).unwrap();
        let analytic = g.gradient(loss, &bound).unwrap();
        let numeric = finite_diff_gradient(
            |p| {
                let (g, _, loss) = build(p)?;
                Ok(g.value(loss).item().unwrap())
            },
            &params,
            1e-5,
        )
        .unwrap();
        for (a, n) in analytic.values().zip(numeric.values()) {
            assert!((a - n).abs() <= 1e-8 * (1.0 + n.abs()), "{a} vs {n}");
        }
    }

    #[test]
    fn log_softmax_nll_matches_fused() {
        let logits = Tensor::from_rows(&[vec![0.2, -1.0, 3.0], vec![1.0, 1.0, -2.0]]).unwrap();
        let labels = [2, 0];
        let params = single("z", logits);
        let mut g1 = Graph::new();
        let b1 = g1.bind(&params);
        let lp = g1.log_softmax(b1.var("z").unwrap()).unwrap();
        let l1 = g1.nll_loss(lp, &labels).unwrap();
        let v1 = g1.value(l1).item().unwrap();
        let g1v = g1.gradient(l1, &b1).unwrap();
        let mut g2 = Graph::new();
        let b2 = g2.bind(&params);
        let l2 = g2.cross_entropy(b2.var("z").unwrap(), &labels).unwrap();
        let v2 = g2.value(l2).item().unwrap();
        let g2v = g2.gradient(l2, &b2).unwrap();
        assert!((v1 - v2).abs() < 1e-14);
        for (a, b) in g1v.values().zip(g2v.values()) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
