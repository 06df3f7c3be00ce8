//! The experiment steps, from data generation to trained runs, as plain
//! functions over an [`ExperimentConfig`] and a seed.

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::grouping::{compute_tree, partition_score, swap_tasks, GroupedTree};
use crate::network::{BranchedNetwork, RankPolicy};
use crate::similarity::{similarity_matrix, tune_heads, HeadTuneLog, SimilarityMatrix};
use crate::synthetic::Dataset;
use crate::trainer::{mode_layout, run_one, RunMode, RunRecord, TaskSpec};
use crate::tree::TaskTree;

pub fn generate_data(cfg: &ExperimentConfig, seed: u64) -> Result<Dataset> {
    let mut data = cfg
        .data
        .generator
        .generate(&cfg.model.network, cfg.data.n_train, cfg.data.n_val, seed)?;
    data.task_names = cfg.task_names();
    Ok(data)
}

pub fn task_specs(data: &Dataset) -> Vec<TaskSpec> {
    TaskSpec::for_dataset(data)
}

/// Fully shared network whose adapters start at zero, so its forward pass
/// is the frozen backbone. Used to tune heads and measure similarity.
pub fn probe_network(cfg: &ExperimentConfig, data: &Dataset, seed: u64) -> Result<BranchedNetwork> {
    let t = data.task_count();
    let outputs: Vec<usize> = data.kinds.iter().map(|k| k.outputs()).collect();
    BranchedNetwork::build(
        &cfg.model.network,
        &TaskTree::shared(cfg.model.network.stage_count, t),
        RankPolicy::Uniform { rank: 1 },
        &data.task_names,
        &outputs,
        seed,
    )
}

/// Probe network with tuned heads.
pub fn tuned_probe(cfg: &ExperimentConfig, data: &Dataset, seed: u64) -> Result<(BranchedNetwork, HeadTuneLog)> {
    let mut net = probe_network(cfg, data, seed)?;
    let log = tune_heads(&mut net, data, &task_specs(data), &cfg.similarity.tuning)?;
    Ok((net, log))
}

/// Similarity over `examples` training examples from a tuned probe.
pub fn similarity(probe: &mut BranchedNetwork, data: &Dataset, examples: usize, seed: u64) -> Result<SimilarityMatrix> {
    similarity_matrix(probe, data, &task_specs(data), examples, seed)
}

/// Tree from the group override when configured, otherwise from `sim`.
pub fn group(cfg: &ExperimentConfig, sim: &SimilarityMatrix) -> Result<GroupedTree> {
    if let Some(groups) = &cfg.grouping.groups {
        let tree = TaskTree::new(groups.clone());
        let scores = tree
            .stages
            .iter()
            .map(|p| partition_score(sim, p).map(|s| s.total))
            .collect::<Result<_>>()?;
        return Ok(GroupedTree {
            schedule: tree.group_counts(),
            tree,
            scores,
            tie_breaks: 0,
        });
    }
    compute_tree(sim, &cfg.schedule(), cfg.grouping.search)
}

/// The configured ablation swap applied to `tree`.
pub fn swapped_tree(cfg: &ExperimentConfig, tree: &TaskTree) -> Result<TaskTree> {
    let [a, b] = cfg
        .ablation
        .swap
        .as_ref()
        .ok_or_else(|| Error::Config("no ablation swap configured".into()))?;
    let stages: Vec<usize> = match &cfg.ablation.stages {
        Some(s) => s.clone(),
        None => (0..tree.stage_count()).collect(),
    };
    swap_tasks(tree, cfg.task_index(a)?, cfg.task_index(b)?, &stages)
}

/// Trains `mode`. `tree` is the progressive tree (already swapped for the
/// ablation); the other modes derive their layout and budget from it.
pub fn train_mode(
    cfg: &ExperimentConfig,
    mode: RunMode,
    tree: &TaskTree,
    data: &Dataset,
    seed: u64,
) -> Result<(BranchedNetwork, RunRecord)> {
    let outputs: Vec<usize> = data.kinds.iter().map(|k| k.outputs()).collect();
    let (tree, policy) = mode_layout(&cfg.model.network, mode, tree, cfg.model.policy(), &outputs)?;
    run_one(mode, &cfg.model.network, &tree, policy, data, &task_specs(data), &cfg.train, seed)
}
