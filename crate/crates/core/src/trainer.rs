//! Multi-task training, evaluation and the Δm summary.

use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::network::{BranchedNetwork, NetworkConfig, RankPolicy, LAYERS_PER_STAGE};
use crate::optim::{AdamW, AdamWConfig, LrSchedule};
use crate::rng::rng_from;
use crate::synthetic::{Dataset, TaskKind};
use crate::tensor::Tensor;
use crate::tglora::ForwardCtx;
use crate::tree::TaskTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Rmse,
    Accuracy,
}

impl MetricKind {
    /// `l_t` of the Δm sum: true when a lower value is better.
    pub fn lower_is_better(self) -> bool {
        matches!(self, MetricKind::Rmse)
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricKind::Rmse => "rmse",
            MetricKind::Accuracy => "accuracy",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub loss: LossKind,
    pub metric: MetricKind,
    pub weight: f64,
}

impl TaskSpec {
    pub fn new(name: &str, kind: TaskKind, weight: f64) -> Result<Self> {
        if !(weight.is_finite() && weight > 0.0) {
            return Err(Error::Config(format!("task {name}: weight {weight} must be positive")));
        }
        let (loss, metric) = match kind {
            TaskKind::Regression => (LossKind::Mse, MetricKind::Rmse),
            TaskKind::Classification { .. } => (LossKind::CrossEntropy, MetricKind::Accuracy),
        };
        Ok(Self {
            name: name.to_string(),
            loss,
            metric,
            weight,
        })
    }

    /// Unit-weight specs matching a dataset's task kinds.
    pub fn for_dataset(data: &Dataset) -> Vec<TaskSpec> {
        data.task_names
            .iter()
            .zip(&data.kinds)
            .map(|(n, &k)| TaskSpec::new(n, k, 1.0).expect("unit weight"))
            .collect()
    }
}

/// `Σ w_t L_t`
pub fn mtl_loss(losses: &[f64], weights: &[f64]) -> Result<f64> {
    if losses.len() != weights.len() {
        return Err(Error::Contract(format!(
            "{} losses for {} weights",
            losses.len(),
            weights.len()
        )));
    }
    Ok(losses.iter().zip(weights).map(|(l, w)| w * l).sum())
}

/// Graph form of [`mtl_loss`].
pub fn mtl_loss_node(g: &mut Graph, losses: &[NodeId], weights: &[f64]) -> Result<NodeId> {
    if losses.len() != weights.len() {
        return Err(Error::Contract(format!(
            "{} losses for {} weights",
            losses.len(),
            weights.len()
        )));
    }
    let scaled: Vec<NodeId> = losses.iter().zip(weights).map(|(&l, &w)| g.scale(l, w)).collect();
    g.sum(&scaled)
}

/// Loss node of one task given its predictions and target column.
pub fn task_loss(g: &mut Graph, spec: &TaskSpec, pred: NodeId, target: &[f64]) -> Result<NodeId> {
    match spec.loss {
        LossKind::Mse => {
            let t = g.constant(Tensor::new(vec![target.len(), 1], target.to_vec())?);
            g.mse(pred, t)
        }
        LossKind::CrossEntropy => {
            let labels: Vec<usize> = target.iter().map(|&v| v as usize).collect();
            g.cross_entropy(pred, &labels)
        }
    }
}

/// Metric of one task from evaluation predictions.
pub fn task_metric(spec: &TaskSpec, pred: &Tensor, target: &[f64]) -> f64 {
    match spec.metric {
        MetricKind::Rmse => {
            let n = target.len().max(1) as f64;
            let se: f64 = pred.data().iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
            (se / n).sqrt()
        }
        MetricKind::Accuracy => {
            let hits = (0..target.len())
                .filter(|&i| {
                    let row = pred.row(i);
                    let arg = row
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                        .map_or(0, |(j, _)| j);
                    arg == target[i] as usize
                })
                .count();
            hits as f64 / target.len().max(1) as f64
        }
    }
}

/// Per-task metrics of `net` on `(x, y)`.
pub fn evaluate(net: &BranchedNetwork, specs: &[TaskSpec], x: &Tensor, y: &Tensor) -> Result<Vec<f64>> {
    let preds = net.predict(x)?;
    Ok(specs
        .iter()
        .zip(&preds)
        .enumerate()
        .map(|(t, (spec, p))| task_metric(spec, p, &Dataset::column(y, t)))
        .collect())
}

/// Average signed relative difference to single-task metrics, in percent.
/// `lower_is_better[t]` flips the sign of task `t`.
pub fn delta_m(multi: &[f64], single: &[f64], lower_is_better: &[bool]) -> Result<f64> {
    if multi.len() != single.len() || multi.len() != lower_is_better.len() || multi.is_empty() {
        return Err(Error::Contract(format!(
            "delta_m needs equal non-empty lengths, got {}, {}, {}",
            multi.len(),
            single.len(),
            lower_is_better.len()
        )));
    }
    let mut total = 0.0;
    for ((&m, &s), &lower) in multi.iter().zip(single).zip(lower_is_better) {
        if s == 0.0 {
            return Err(Error::Contract("single-task metric is zero".into()));
        }
        let sign = if lower { -1.0 } else { 1.0 };
        total += sign * (m - s) / s;
    }
    Ok(100.0 * total / multi.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            optimizer: AdamWConfig::default(),
            schedule: LrSchedule::Constant,
        }
    }
}

/// Losses and metrics of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// `[epoch][task]` mean training loss.
    pub epoch_losses: Vec<Vec<f64>>,
    /// Weighted joint loss on the full training set before any update.
    pub initial_joint_loss: f64,
    /// Weighted joint loss on the full training set after training.
    pub final_joint_loss: f64,
    pub metrics: Vec<f64>,
}

/// Weighted joint loss of `net` on `(x, y)` in evaluation mode.
pub fn joint_loss(net: &BranchedNetwork, specs: &[TaskSpec], x: &Tensor, y: &Tensor) -> Result<f64> {
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
    Ok(g.value(l).data()[0])
}

/// Trains adapters and heads of `net` under the weighted multi-task loss.
/// Frozen weights never change. Deterministic for a given `seed`.
pub fn train(net: &mut BranchedNetwork, data: &Dataset, specs: &[TaskSpec], cfg: &TrainConfig, seed: u64) -> Result<TrainLog> {
    if specs.len() != net.task_count() || specs.len() != data.task_count() {
        return Err(Error::Contract("task specs, network and dataset disagree on task count".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let weights: Vec<f64> = specs.iter().map(|s| s.weight).collect();
    let n = data.n_train();
    let initial_joint_loss = joint_loss(net, specs, &data.x_train, &data.y_train)?;
    let mut opt = AdamW::new(cfg.optimizer);
    let mut batch_rng = rng_from(seed, "batches");
    let mut dropout_rng = rng_from(seed, "dropout");
    let rate = net.config.adapter_dropout;
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut batch_rng);
        let lr = cfg.schedule.lr_at(cfg.optimizer.lr, epoch, cfg.epochs);
        let mut sums = vec![0.0; specs.len()];
        for batch in order.chunks(cfg.batch_size) {
            let x = data.x_train.gather_rows(batch);
            let y = data.y_train.gather_rows(batch);
            let mut g = Graph::new();
            let xn = g.constant(x);
            let mut ctx = ForwardCtx {
                dropout: (rate > 0.0).then_some((rate, &mut dropout_rng)),
                track_frozen: false,
            };
            let out = net.forward(&mut g, xn, &mut ctx)?;
            let losses: Vec<NodeId> = specs
                .iter()
                .enumerate()
                .map(|(t, s)| task_loss(&mut g, s, out.predictions[t], &Dataset::column(&y, t)))
                .collect::<Result<_>>()?;
            let joint = mtl_loss_node(&mut g, &losses, &weights)?;
            let jv = g.value(joint).data()[0];
            if !jv.is_finite() {
                return Err(Error::NonFiniteLoss {
                    value: jv,
                    context: format!("epoch {epoch}"),
                });
            }
            for (s, &l) in sums.iter_mut().zip(&losses) {
                *s += g.value(l).data()[0] * batch.len() as f64;
            }
            let grads = g.backward(joint)?;
            net.store.zero_grad();
            grads.accumulate_into(&g, &mut net.store);
            opt.step_with_lr(&mut net.store, lr)?;
        }
        epoch_losses.push(sums.iter().map(|s| s / n as f64).collect());
    }
    net.store.zero_grad();
    let final_joint_loss = joint_loss(net, specs, &data.x_train, &data.y_train)?;
    let metrics = evaluate(net, specs, &data.x_val, &data.y_val)?;
    Ok(TrainLog {
        epoch_losses,
        initial_joint_loss,
        final_joint_loss,
        metrics,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    /// One adapter path per task at every stage.
    Individual,
    /// One adapter path shared by all tasks.
    Shared,
    /// Task-grouped adapters following a task tree.
    Progressive,
    /// Single-task adapters at full rank; the Δm baseline.
    Reference,
    /// Progressive with two tasks swapped between groups.
    AblateSwap,
}

impl RunMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::Individual => "individual",
            RunMode::Shared => "shared",
            RunMode::Progressive => "progressive",
            RunMode::Reference => "reference",
            RunMode::AblateSwap => "ablate-swap",
        }
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "individual" => RunMode::Individual,
            "shared" => RunMode::Shared,
            "progressive" => RunMode::Progressive,
            "reference" => RunMode::Reference,
            "ablate-swap" => RunMode::AblateSwap,
            other => return Err(Error::Config(format!("unknown mode `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetric {
    pub task: String,
    pub metric: MetricKind,
    pub value: f64,
}

/// Everything persisted about one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub mode: RunMode,
    pub seed: u64,
    pub tree: TaskTree,
    pub policy: RankPolicy,
    pub train: TrainConfig,
    pub epoch_losses: Vec<Vec<f64>>,
    pub initial_joint_loss: f64,
    pub final_joint_loss: f64,
    pub per_task: Vec<TaskMetric>,
    pub delta_m_percent: Option<f64>,
    pub trainable_params: usize,
    pub wall_time_secs: f64,
}

impl RunRecord {
    pub fn metric_values(&self) -> Vec<f64> {
        self.per_task.iter().map(|m| m.value).collect()
    }

    pub fn lower_is_better(&self) -> Vec<bool> {
        self.per_task.iter().map(|m| m.metric.lower_is_better()).collect()
    }

    /// Fills `delta_m_percent` against `baseline` metrics.
    pub fn set_baseline(&mut self, baseline: &[f64]) -> Result<()> {
        self.delta_m_percent = Some(delta_m(&self.metric_values(), baseline, &self.lower_is_better())?);
        Ok(())
    }

    /// Record with the wall time zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_time_secs: 0.0,
            ..self.clone()
        }
    }
}

/// Shape of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsFile {
    pub seed: u64,
    pub mode: RunMode,
    pub per_task: Vec<TaskMetric>,
    pub delta_m_percent: Option<f64>,
    pub trainable_params: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl MetricsFile {
    pub fn from_record(r: &RunRecord, config_hash: Option<String>) -> Self {
        Self {
            seed: r.seed,
            mode: r.mode,
            per_task: r.per_task.clone(),
            delta_m_percent: r.delta_m_percent,
            trainable_params: r.trainable_params,
            config_hash,
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::format("metrics.json", e))
    }
}

/// Builds and trains one network, returning the trained network and its
/// record (Δm unset).
pub fn run_one(
    mode: RunMode,
    net_cfg: &NetworkConfig,
    tree: &TaskTree,
    policy: RankPolicy,
    data: &Dataset,
    specs: &[TaskSpec],
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<(BranchedNetwork, RunRecord)> {
    let start = Instant::now();
    let outputs: Vec<usize> = data.kinds.iter().map(TaskKind::outputs).collect();
    let mut net = BranchedNetwork::build(net_cfg, tree, policy, &data.task_names, &outputs, seed)?;
    let log = train(&mut net, data, specs, train_cfg, seed)?;
    let per_task = specs
        .iter()
        .zip(&log.metrics)
        .map(|(s, &value)| TaskMetric {
            task: s.name.clone(),
            metric: s.metric,
            value,
        })
        .collect();
    let record = RunRecord {
        mode,
        seed,
        tree: tree.clone(),
        policy,
        train: train_cfg.clone(),
        epoch_losses: log.epoch_losses,
        initial_joint_loss: log.initial_joint_loss,
        final_joint_loss: log.final_joint_loss,
        per_task,
        delta_m_percent: None,
        trainable_params: net.trainable_count(),
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    Ok((net, record))
}

/// Adapter parameters of one rank unit spread over `streams` groups in every
/// layer of every stage.
fn rank_unit(net_cfg: &NetworkConfig, streams: usize) -> usize {
    net_cfg.stage_count * LAYERS_PER_STAGE * streams * 2 * net_cfg.hidden_dim
}

/// Uniform rank whose adapter count is closest to `budget` (lower rank on
/// ties).
pub fn matched_uniform_rank(net_cfg: &NetworkConfig, streams: usize, budget: usize) -> Result<usize> {
    let unit = rank_unit(net_cfg, streams);
    let lo = budget / unit;
    let rank = if budget - lo * unit <= (lo + 1) * unit - budget { lo } else { lo + 1 };
    if rank == 0 || rank > net_cfg.hidden_dim {
        return Err(Error::Config(format!(
            "adapter budget {budget} needs rank {rank} over {streams} streams, outside 1..={}",
            net_cfg.hidden_dim
        )));
    }
    Ok(rank)
}

/// Per-layer rank of a policy when every task has its own path.
fn full_rank(policy: RankPolicy) -> usize {
    match policy {
        RankPolicy::Proportional { total_rank, .. } => total_rank,
        RankPolicy::Uniform { rank } => rank,
    }
}

/// Tree and rank policy of `mode`, given the progressive tree and policy.
///
/// Shared and individual runs get the uniform rank whose adapter count is
/// closest to the progressive one, and never differ from it by more than
/// one rank unit. The reference run gives every task its own path at the
/// progressive policy's full rank.
pub fn mode_layout(
    net_cfg: &NetworkConfig,
    mode: RunMode,
    tree: &TaskTree,
    policy: RankPolicy,
    head_outputs: &[usize],
) -> Result<(TaskTree, RankPolicy)> {
    let t = head_outputs.len();
    let s = net_cfg.stage_count;
    let matched = |streams: usize| -> Result<RankPolicy> {
        let shape = crate::network::NetworkShape::from_tree(net_cfg, tree, policy, head_outputs)?;
        let budget = crate::cost::adapter_params(&shape);
        let rank = matched_uniform_rank(net_cfg, streams, budget)?;
        let got = rank_unit(net_cfg, streams) * rank;
        if got.abs_diff(budget) > rank_unit(net_cfg, streams) {
            return Err(Error::Config(format!("{mode} budget {got} is more than one rank unit from {budget}")));
        }
        Ok(RankPolicy::Uniform { rank })
    };
    Ok(match mode {
        RunMode::Progressive | RunMode::AblateSwap => (tree.clone(), policy),
        RunMode::Shared => (TaskTree::shared(s, t), matched(1)?),
        RunMode::Individual => (TaskTree::individual(s, t), matched(t)?),
        RunMode::Reference => (TaskTree::individual(s, t), RankPolicy::Uniform { rank: full_rank(policy) }),
    })
}

/// The progressive run, its two parameter-matched extremes and the
/// single-task reference that supplies their Δm baseline.
#[derive(Debug, Clone)]
pub struct Baselines {
    pub reference: RunRecord,
    pub individual: RunRecord,
    pub shared: RunRecord,
    pub progressive: RunRecord,
}

/// Trains the reference, then individual, shared and progressive runs with
/// equalized adapter budgets, and fills in each run's Δm.
pub fn run_baselines(
    net_cfg: &NetworkConfig,
    tree: &TaskTree,
    policy: RankPolicy,
    data: &Dataset,
    specs: &[TaskSpec],
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<Baselines> {
    let outputs: Vec<usize> = data.kinds.iter().map(TaskKind::outputs).collect();
    let run = |mode: RunMode| -> Result<RunRecord> {
        let (tree, policy) = mode_layout(net_cfg, mode, tree, policy, &outputs)?;
        Ok(run_one(mode, net_cfg, &tree, policy, data, specs, train_cfg, seed)?.1)
    };
    let mut reference = run(RunMode::Reference)?;
    let baseline = reference.metric_values();
    reference.set_baseline(&baseline)?;
    let mut others = [RunMode::Individual, RunMode::Shared, RunMode::Progressive]
        .into_iter()
        .map(|m| {
            let mut r = run(m)?;
            r.set_baseline(&baseline)?;
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    let progressive = others.pop().expect("three runs");
    let shared = others.pop().expect("three runs");
    let individual = others.pop().expect("three runs");
    Ok(Baselines {
        reference,
        individual,
        shared,
        progressive,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mtl_loss_unit_weights() {
        assert!((mtl_loss(&[0.2, 0.3], &[1.0, 1.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(mtl_loss(&[0.2], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn delta_m_identity_is_zero() {
        let m = [1.0, 2.0, 3.0];
        assert_eq!(delta_m(&m, &m, &[false, true, false]).unwrap(), 0.0);
    }

    #[test]
    fn delta_m_signs() {
        // improving a higher-is-better metric raises Δm, raising a
        // lower-is-better one lowers it
        assert!(delta_m(&[1.1], &[1.0], &[false]).unwrap() > 0.0);
        assert!(delta_m(&[1.1], &[1.0], &[true]).unwrap() < 0.0);
        assert!(delta_m(&[1.0], &[0.0], &[false]).is_err());
    }

    #[test]
    fn delta_m_known_rows() {
        let pascal = delta_m(
            &[67.90, 59.84, 65.40, 16.60],
            &[67.21, 61.93, 62.35, 17.97],
            &[false, false, false, true],
        )
        .unwrap();
        assert!((pascal - 2.54).abs() < 0.005, "{pascal}");
        let nyud = delta_m(&[41.52, 24.99, 0.6212], &[41.85, 24.01, 0.6322], &[false, true, true]).unwrap();
        assert!((nyud + 1.04).abs() < 0.005, "{nyud}");
    }

    #[test]
    fn metrics() {
        let spec = TaskSpec::new("a", TaskKind::Regression, 1.0).unwrap();
        let p = Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap();
        assert!((task_metric(&spec, &p, &[0.0, 3.0]) - 0.5f64.sqrt()).abs() < 1e-15);
        let spec = TaskSpec::new("b", TaskKind::Classification { classes: 2 }, 1.0).unwrap();
        let p = Tensor::new(vec![2, 2], vec![0.1, 0.9, 0.8, 0.2]).unwrap();
        assert_eq!(task_metric(&spec, &p, &[1.0, 1.0]), 0.5);
        assert!(TaskSpec::new("c", TaskKind::Regression, 0.0).is_err());
    }

    #[test]
    fn matched_rank_examples() {
        let cfg = NetworkConfig::default();
        // 80 rank units of 64 parameters each
        assert_eq!(matched_uniform_rank(&cfg, 1, 5120).unwrap(), 10);
        assert_eq!(matched_uniform_rank(&cfg, 4, 5120).unwrap(), 2);
        assert!(matched_uniform_rank(&cfg, 4, 10).is_err());
    }

    #[test]
    fn run_mode_round_trip() {
        for m in [RunMode::Individual, RunMode::Shared, RunMode::Progressive, RunMode::Reference, RunMode::AblateSwap] {
            assert_eq!(m.as_str().parse::<RunMode>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
        }
    }
}
