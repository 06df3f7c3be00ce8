#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};

use tgmtl::autodiff::Graph;
use tgmtl::network::{BranchedNetwork, NetworkConfig, RankPolicy};
use tgmtl::rng::{normal_vec, Rng};
use tgmtl::similarity::SimilarityMatrix;
use tgmtl::synthetic::TaskKind;
use tgmtl::tensor::Tensor;
use tgmtl::tglora::ForwardCtx;
use tgmtl::trainer::{mtl_loss_node, task_loss, TaskSpec};
use tgmtl::tree::{Partition, TaskTree};

pub fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Uniform random set partition of `0..t` (labels drawn then compacted).
pub fn random_partition(rng: &mut Rng, t: usize, max_groups: usize) -> Partition {
    let k = rng.random_range(1..=max_groups.min(t));
    let labels: Vec<usize> = (0..t).map(|_| rng.random_range(0..k)).collect();
    Partition::from_labels(&compact(&labels))
}

fn compact(labels: &[usize]) -> Vec<usize> {
    let mut seen: Vec<usize> = Vec::new();
    labels
        .iter()
        .map(|l| match seen.iter().position(|s| s == l) {
            Some(i) => i,
            None => {
                seen.push(*l);
                seen.len() - 1
            }
        })
        .collect()
}

/// Random valid tree: each earlier stage merges random groups of the next.
pub fn random_tree(rng: &mut Rng, stages: usize, t: usize) -> TaskTree {
    let mut out = vec![random_partition(rng, t, t)];
    for _ in 1..stages {
        let next = out.last().unwrap();
        let coarse = random_partition(rng, next.len(), next.len());
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); coarse.len()];
        for (gi, g) in next.groups().iter().enumerate() {
            groups[coarse.group_of(gi).unwrap()].extend(g);
        }
        let labels: Vec<usize> = (0..t)
            .map(|task| groups.iter().position(|g| g.contains(&task)).unwrap())
            .collect();
        out.push(Partition::from_labels(&compact(&labels)));
    }
    out.reverse();
    TaskTree::new(out)
}

/// Random symmetric matrix with unit diagonal and entries in [-1, 1].
pub fn random_similarity(rng: &mut Rng, t: usize) -> SimilarityMatrix {
    let mut v = vec![vec![1.0; t]; t];
    for i in 0..t {
        for j in i + 1..t {
            let x = rng.random_range(-1.0..=1.0);
            v[i][j] = x;
            v[j][i] = x;
        }
    }
    SimilarityMatrix::from_values(v).unwrap()
}

/// Every set partition of `0..t`, built by recursive insertion.
pub fn all_partitions(t: usize) -> Vec<Vec<Vec<usize>>> {
    let mut out: Vec<Vec<Vec<usize>>> = vec![vec![]];
    for task in 0..t {
        let mut next = Vec::new();
        for p in &out {
            for gi in 0..p.len() {
                let mut q = p.clone();
                q[gi].push(task);
                next.push(q);
            }
            let mut q = p.clone();
            q.push(vec![task]);
            next.push(q);
        }
        out = next;
    }
    out
}

/// Independent partition score: per task, mean similarity to its group
/// mates (zero alone), summed.
pub fn oracle_score(sim: &SimilarityMatrix, groups: &[Vec<usize>]) -> f64 {
    let mut total = 0.0;
    for g in groups {
        if g.len() < 2 {
            continue;
        }
        for &i in g {
            let s: f64 = g.iter().filter(|&&j| j != i).map(|&j| sim.get(i, j)).sum();
            total += s / (g.len() - 1) as f64;
        }
    }
    total
}

/// A small random network with randomized adapters, its task specs, and a
/// batch of inputs and per-task targets.
pub struct Problem {
    pub net: BranchedNetwork,
    pub specs: Vec<TaskSpec>,
    pub x: Tensor,
    pub y: Vec<Vec<f64>>,
}

pub fn random_problem(seed: u64) -> Problem {
    let mut r = rng(seed);
    let t = r.random_range(1..=4);
    let stages = r.random_range(1..=3);
    let cfg = NetworkConfig {
        input_dim: r.random_range(2..=4),
        hidden_dim: r.random_range(2..=5),
        stage_count: stages,
        head_hidden: r.random_range(2..=3),
        adapter_dropout: 0.0,
        backbone_seed: seed,
        ..NetworkConfig::default()
    };
    let tree = random_tree(&mut r, stages, t);
    let kinds: Vec<TaskKind> = (0..t)
        .map(|_| {
            if r.random_bool(0.5) {
                TaskKind::Regression
            } else {
                TaskKind::Classification {
                    classes: r.random_range(2..=3),
                }
            }
        })
        .collect();
    let names: Vec<String> = (0..t).map(|i| format!("t{i}")).collect();
    let outputs: Vec<usize> = kinds.iter().map(TaskKind::outputs).collect();
    let rank = r.random_range(1..=2.min(cfg.hidden_dim));
    let mut net = BranchedNetwork::build(&cfg, &tree, RankPolicy::Uniform { rank }, &names, &outputs, seed).unwrap();
    randomize_adapters(&mut net, &mut r);
    let specs: Vec<TaskSpec> = names
        .iter()
        .zip(&kinds)
        .map(|(n, &k)| TaskSpec::new(n, k, r.random_range(0.5..2.0)).unwrap())
        .collect();
    let n = r.random_range(1..=3);
    let x = Tensor::new(vec![n, cfg.input_dim], normal_vec(&mut r, n * cfg.input_dim, 1.0)).unwrap();
    let y = kinds
        .iter()
        .map(|k| match k {
            TaskKind::Regression => normal_vec(&mut r, n, 1.0),
            TaskKind::Classification { classes } => (0..n).map(|_| r.random_range(0..*classes) as f64).collect(),
        })
        .collect();
    Problem { net, specs, x, y }
}

/// Replaces every adapter `B` (zero at init) with random values.
pub fn randomize_adapters(net: &mut BranchedNetwork, r: &mut Rng) {
    let ids: Vec<_> = net
        .store
        .iter()
        .filter(|(_, p)| p.name.ends_with(".lora_b"))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let p = net.store.get_mut(id);
        let len = p.value.len();
        p.value = Tensor::new(p.value.shape().to_vec(), normal_vec(r, len, 0.1)).unwrap();
    }
}

/// Joint weighted loss of `p`, and optionally the gradient of every
/// parameter (frozen ones included) in store order.
pub fn loss_and_grads(p: &Problem, with_grads: bool) -> (f64, Vec<Vec<f64>>) {
    let mut g = Graph::new();
    let x = g.constant(p.x.clone());
    let mut ctx = ForwardCtx::with_frozen_grads();
    let out = p.net.forward(&mut g, x, &mut ctx).unwrap();
    let losses: Vec<_> = p
        .specs
        .iter()
        .enumerate()
        .map(|(t, s)| task_loss(&mut g, s, out.predictions[t], &p.y[t]).unwrap())
        .collect();
    let weights: Vec<f64> = p.specs.iter().map(|s| s.weight).collect();
    let loss = mtl_loss_node(&mut g, &losses, &weights).unwrap();
    let value = g.value(loss).data()[0];
    if !with_grads {
        return (value, Vec::new());
    }
    let grads = g.backward(loss).unwrap();
    let mut store = p.net.store.clone();
    store.zero_grad();
    grads.accumulate_into(&g, &mut store);
    let out = store
        .iter()
        .map(|(_, param)| param.grad.clone().unwrap_or_else(|| vec![0.0; param.value.len()]))
        .collect();
    (value, out)
}

/// Largest relative error between analytic gradients and a fourth-order
/// central difference over every parameter entry of `p`. Entries whose
/// gradients are both below `floor` are compared absolutely against it.
pub fn max_gradient_error(p: &mut Problem, floor: f64) -> f64 {
    let (_, analytic) = loss_and_grads(p, true);
    let ids: Vec<_> = p.net.store.iter().map(|(id, _)| id).collect();
    let h = 1e-4;
    let mut worst = 0.0f64;
    for (k, id) in ids.into_iter().enumerate() {
        for i in 0..p.net.store.value(id).len() {
            let orig = p.net.store.value(id).data()[i];
            let mut at = |delta: f64| {
                p.net.store.get_mut(id).value.data_mut()[i] = orig + delta;
                loss_and_grads(p, false).0
            };
            let numeric = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
            p.net.store.get_mut(id).value.data_mut()[i] = orig;
            let a = analytic[k][i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(err);
        }
    }
    worst
}

/// Random permutation of `0..n`.
pub fn permutation(rng: &mut Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}
