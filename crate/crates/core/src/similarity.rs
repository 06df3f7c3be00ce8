//! Gradient-based task similarity on a frozen backbone.
//!
//! For an example `x` and task `t`, `g(x, t)` is the gradient of task
//! `t`'s loss with respect to every frozen backbone weight. Two tasks are
//! compared by the cosine of their gradients on the same example, averaged
//! over `N` examples.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::network::BranchedNetwork;
use crate::optim::{AdamW, AdamWConfig};
use crate::params::flatten_gradients;
use crate::rng::rng_from;
use crate::synthetic::Dataset;
use crate::tensor::Tensor;
use crate::tglora::ForwardCtx;
use crate::trainer::{mtl_loss_node, task_loss, TaskSpec};

pub const DEFAULT_EXAMPLES: usize = 128;

/// Below this norm a gradient counts as zero and its pairs score 0.
pub const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadTuning {
    pub steps: usize,
    pub lr: f64,
    /// Tuning uses the first `min(subset, n_train)` training examples.
    pub subset: usize,
}

impl Default for HeadTuning {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 1e-3,
            subset: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadTuneLog {
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Joint loss of every head on `(x, y)` without dropout.
fn head_loss(net: &BranchedNetwork, specs: &[TaskSpec], x: &Tensor, y: &Tensor) -> Result<(Graph, NodeId)> {
    let mut g = Graph::new();
    let xn = g.constant(x.clone());
    let out = net.forward(&mut g, xn, &mut ForwardCtx::eval())?;
    let losses: Vec<NodeId> = specs
        .iter()
        .enumerate()
        .map(|(t, s)| task_loss(&mut g, s, out.predictions[t], &Dataset::column(y, t)))
        .collect::<Result<_>>()?;
    let weights: Vec<f64> = specs.iter().map(|s| s.weight).collect();
    let l = mtl_loss_node(&mut g, &losses, &weights)?;
    Ok((g, l))
}

/// Full-batch AdamW on the heads alone; adapters stay frozen for the
/// duration and dropout is off.
pub fn tune_heads(net: &mut BranchedNetwork, data: &Dataset, specs: &[TaskSpec], cfg: &HeadTuning) -> Result<HeadTuneLog> {
    if specs.len() != net.task_count() || specs.len() != data.task_count() {
        return Err(Error::Contract("task specs, network and dataset disagree on task count".into()));
    }
    let (x, y) = data.train_subset(cfg.subset);
    net.set_adapters_frozen(true);
    let result = (|| {
        let mut opt = AdamW::new(AdamWConfig {
            lr: cfg.lr,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        let mut initial = None;
        for step in 0..=cfg.steps {
            let (g, l) = head_loss(net, specs, &x, &y)?;
            let v = g.value(l).data()[0];
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss {
                    value: v,
                    context: format!("head tuning step {step}"),
                });
            }
            initial.get_or_insert(v);
            if step == cfg.steps {
                return Ok(HeadTuneLog {
                    steps: cfg.steps,
                    initial_loss: initial.unwrap_or(v),
                    final_loss: v,
                });
            }
            let grads = g.backward(l)?;
            net.store.zero_grad();
            grads.accumulate_into(&g, &mut net.store);
            opt.step(&mut net.store)?;
        }
        unreachable!("loop returns on its last step")
    })();
    net.store.zero_grad();
    net.set_adapters_frozen(false);
    result
}

/// Per-task backbone gradients of one example, one flat vector per task.
/// Each task's loss is scaled by its spec weight.
pub fn example_gradients(net: &mut BranchedNetwork, specs: &[TaskSpec], x: &[f64], y: &[f64]) -> Result<Vec<Vec<f64>>> {
    let t = net.task_count();
    if specs.len() != t || y.len() != t {
        return Err(Error::Contract(format!(
            "{} specs and {} targets for {t} tasks",
            specs.len(),
            y.len()
        )));
    }
    let mut g = Graph::new();
    let xn = g.constant(Tensor::new(vec![1, x.len()], x.to_vec())?);
    let out = net.forward(&mut g, xn, &mut ForwardCtx::with_frozen_grads())?;
    let mut losses = Vec::with_capacity(t);
    for (task, spec) in specs.iter().enumerate() {
        let l = task_loss(&mut g, spec, out.predictions[task], &y[task..=task])?;
        losses.push(g.scale(l, spec.weight));
    }
    let mut grads = Vec::with_capacity(t);
    for &l in &losses {
        let back = g.backward(l)?;
        net.store.zero_grad();
        back.accumulate_into(&g, &mut net.store);
        grads.push(flatten_gradients(&net.store, BranchedNetwork::is_shared_param)?);
    }
    net.store.zero_grad();
    Ok(grads)
}

/// `g(x, t)` for a single task.
pub fn example_gradient(net: &mut BranchedNetwork, specs: &[TaskSpec], x: &[f64], y: &[f64], task: usize) -> Result<Vec<f64>> {
    let mut all = example_gradients(net, specs, x, y)?;
    if task >= all.len() {
        return Err(Error::Contract(format!("task {task} out of range")));
    }
    Ok(all.swap_remove(task))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine of `g / (|g| + |g'|)` and `g' / (|g| + |g'|)`; 0 when either
/// gradient is (numerically) zero.
pub fn pair_similarity(g: &[f64], h: &[f64]) -> Result<f64> {
    if g.len() != h.len() {
        return Err(Error::Dimension {
            op: "pair_similarity",
            lhs: vec![g.len()],
            rhs: vec![h.len()],
        });
    }
    let (ng, nh) = (norm(g), norm(h));
    if ng < ZERO_NORM || nh < ZERO_NORM {
        return Ok(0.0);
    }
    let c = 1.0 / (ng + nh);
    let (mut dot, mut a2, mut b2) = (0.0, 0.0, 0.0);
    for (x, y) in g.iter().zip(h) {
        let (a, b) = (x * c, y * c);
        dot += a * b;
        a2 += a * a;
        b2 += b * b;
    }
    Ok((dot / (a2.sqrt() * b2.sqrt())).clamp(-1.0, 1.0))
}

/// Square matrix of task similarities with a unit diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub task_names: Vec<String>,
    values: Vec<Vec<f64>>,
    /// Examples averaged; unknown for matrices read back from CSV.
    pub examples: Option<usize>,
}

impl SimilarityMatrix {
    /// Checks shape, range, symmetry and the unit diagonal.
    pub fn new(task_names: Vec<String>, values: Vec<Vec<f64>>, examples: Option<usize>) -> Result<Self> {
        let t = task_names.len();
        if t == 0 {
            return Err(Error::format("similarity matrix", "no tasks"));
        }
        if values.len() != t || values.iter().any(|r| r.len() != t) {
            return Err(Error::format("similarity matrix", format!("expected {t}×{t} values")));
        }
        for i in 0..t {
            if values[i][i] != 1.0 {
                return Err(Error::format("similarity matrix", format!("diagonal entry {i} is {}", values[i][i])));
            }
            for j in 0..t {
                let v = values[i][j];
                if !(-1.0..=1.0).contains(&v) {
                    return Err(Error::format("similarity matrix", format!("entry ({i},{j}) = {v} outside [-1, 1]")));
                }
                if (v - values[j][i]).abs() > 1e-12 {
                    return Err(Error::format("similarity matrix", format!("entries ({i},{j}) and ({j},{i}) differ")));
                }
            }
        }
        Ok(Self {
            task_names,
            values,
            examples,
        })
    }

    /// Matrix over tasks named `t0, t1, …` from raw values.
    pub fn from_values(values: Vec<Vec<f64>>) -> Result<Self> {
        let names = (0..values.len()).map(|i| format!("t{i}")).collect();
        Self::new(names, values, None)
    }

    pub fn task_count(&self) -> usize {
        self.task_names.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i][j]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.values
    }

    /// Header of task names, then one row per task with 6 decimals.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.task_names).map_err(|e| Error::format("similarity csv", e))?;
        for row in &self.values {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            w.write_record(&cells).map_err(|e| Error::format("similarity csv", e))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::format("similarity csv", e))?;
        String::from_utf8(bytes).map_err(|e| Error::format("similarity csv", e))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let names: Vec<String> = r
            .headers()
            .map_err(|e| Error::format("similarity csv", e))?
            .iter()
            .map(|s| s.trim().to_string())
            .collect();
        let mut values = Vec::with_capacity(names.len());
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::format("similarity csv", e))?;
            let row = rec
                .iter()
                .map(|c| c.trim().parse::<f64>().map_err(|e| Error::format("similarity csv", format!("`{c}`: {e}"))))
                .collect::<Result<Vec<f64>>>()?;
            values.push(row);
        }
        // 6-decimal output of a unit diagonal prints 1.000000 exactly
        Self::new(names, values, None)
    }

    /// Plain-text table for terminals.
    pub fn pretty(&self) -> String {
        let mut s = String::new();
        let w = self.task_names.iter().map(String::len).max().unwrap_or(0).max(7);
        let _ = write!(s, "{:w$}", "");
        for n in &self.task_names {
            let _ = write!(s, " {n:>w$}");
        }
        s.push('\n');
        for (n, row) in self.task_names.iter().zip(&self.values) {
            let _ = write!(s, "{n:w$}");
            for v in row {
                let _ = write!(s, " {v:>w$.3}");
            }
            s.push('\n');
        }
        s
    }
}

/// Indices of the `n` examples used for the matrix: a seeded permutation of
/// the training set, truncated.
pub fn example_indices(n_train: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::Config("similarity needs at least one example".into()));
    }
    if n > n_train {
        return Err(Error::Config(format!("{n} similarity examples requested, dataset has {n_train}")));
    }
    let mut idx: Vec<usize> = (0..n_train).collect();
    idx.shuffle(&mut rng_from(seed, "similarity.examples"));
    idx.truncate(n);
    Ok(idx)
}

/// Per-example similarity matrices, one per selected example, in order.
pub fn per_example_similarities(
    net: &mut BranchedNetwork,
    data: &Dataset,
    specs: &[TaskSpec],
    indices: &[usize],
) -> Result<Vec<Vec<Vec<f64>>>> {
    let t = data.task_count();
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let grads = example_gradients(net, specs, data.x_train.row(i), data.y_train.row(i))?;
        let mut m = vec![vec![1.0; t]; t];
        for a in 0..t {
            for b in a + 1..t {
                let s = pair_similarity(&grads[a], &grads[b])?;
                m[a][b] = s;
                m[b][a] = s;
            }
        }
        out.push(m);
    }
    Ok(out)
}

/// Mean pairwise gradient similarity over `n` training examples chosen by
/// `seed`. Off-diagonal entries are summed in example order.
pub fn similarity_matrix(net: &mut BranchedNetwork, data: &Dataset, specs: &[TaskSpec], n: usize, seed: u64) -> Result<SimilarityMatrix> {
    let indices = example_indices(data.n_train(), n, seed)?;
    let per = per_example_similarities(net, data, specs, &indices)?;
    let t = data.task_count();
    let mut values = vec![vec![1.0; t]; t];
    for a in 0..t {
        for b in a + 1..t {
            let sum: f64 = per.iter().map(|m| m[a][b]).sum();
            let v = (sum / n as f64).clamp(-1.0, 1.0);
            values[a][b] = v;
            values[b][a] = v;
        }
    }
    SimilarityMatrix::new(data.task_names.clone(), values, Some(n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_similarity_basics() {
        let g = [1.0, 2.0, -3.0];
        assert!((pair_similarity(&g, &g).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(pair_similarity(&[1.0, 0.0], &[0.0, 2.0]).unwrap(), 0.0);
        assert_eq!(pair_similarity(&[0.0, 0.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!(pair_similarity(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let m = SimilarityMatrix::new(
            vec!["a".into(), "b".into()],
            vec![vec![1.0, 0.25], vec![0.25, 1.0]],
            Some(3),
        )
        .unwrap();
        let csv = m.to_csv().unwrap();
        assert_eq!(csv, "a,b\n1.000000,0.250000\n0.250000,1.000000\n");
        let back = SimilarityMatrix::from_csv(&csv).unwrap();
        assert_eq!(back.rows(), m.rows());
        assert_eq!(back.task_names, m.task_names);
    }

    #[test]
    fn malformed_matrices_rejected() {
        assert!(SimilarityMatrix::from_csv("a,b\n1,0.5\n0.4,1\n").is_err());
        assert!(SimilarityMatrix::from_csv("a,b\n0.9,0.5\n0.5,1\n").is_err());
        assert!(SimilarityMatrix::from_csv("a,b\n1,2\n2,1\n").is_err());
        assert!(SimilarityMatrix::from_csv("a,b\n1,0.5\n").is_err());
        assert!(SimilarityMatrix::from_csv("a,b\n1,x\nx,1\n").is_err());
    }

    #[test]
    fn zero_examples_rejected() {
        assert!(example_indices(10, 0, 0).is_err());
        assert!(example_indices(10, 11, 0).is_err());
        assert_eq!(example_indices(10, 10, 0).unwrap().len(), 10);
    }
}
