//! Branched multi-task network.
//!
//! A frozen stem maps inputs to the hidden width. Each backbone stage is a
//! residual block `h + L₂(gelu(L₁(h)))` whose two linear maps are
//! task-grouped adapter layers carrying that stage's partition. Streams are
//! routed along the task tree: a group's input is its parent group's output
//! from the previous stage, copied when the parent splits. Every task ends
//! in its own trainable head `d → head_hidden → outputs`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::{normal_vec, rng_from};
use crate::tensor::Tensor;
use crate::tglora::{allocate_ranks, ForwardCtx, TgLoraLayer, DEFAULT_ADAPTER_DROPOUT, DEFAULT_ALPHA};
use crate::tree::{validate_tree, TaskTree};

/// Linear maps per backbone block.
pub const LAYERS_PER_STAGE: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub stage_count: usize,
    pub head_hidden: usize,
    pub alpha: f64,
    pub adapter_dropout: f64,
    /// Seed of the frozen "pre-trained" weights.
    pub backbone_seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            hidden_dim: 32,
            stage_count: 4,
            head_hidden: 16,
            alpha: DEFAULT_ALPHA,
            adapter_dropout: DEFAULT_ADAPTER_DROPOUT,
            backbone_seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.stage_count == 0 || self.head_hidden == 0 {
            return Err(Error::Config("network dimensions and stage count must be positive".into()));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha {} must be positive", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.adapter_dropout) {
            return Err(Error::Config(format!(
                "adapter dropout {} outside [0, 1)",
                self.adapter_dropout
            )));
        }
        Ok(())
    }
}

/// How adapter ranks are assigned to the groups of each stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RankPolicy {
    /// `total_rank` per layer split by group size. Stages made only of
    /// single-task groups use `fixed_specific_rank` per group when set.
    Proportional {
        total_rank: usize,
        fixed_specific_rank: Option<usize>,
    },
    /// Every group gets the same rank.
    Uniform { rank: usize },
}

impl RankPolicy {
    pub fn proportional(total_rank: usize) -> Self {
        RankPolicy::Proportional {
            total_rank,
            fixed_specific_rank: Some(4),
        }
    }
}

/// Per-stage, per-group adapter ranks for `tree` (identical for both layers
/// of a block).
pub fn plan_ranks(tree: &TaskTree, policy: RankPolicy) -> Result<Vec<Vec<usize>>> {
    let tasks = tree.task_count();
    tree.stages
        .iter()
        .map(|p| match policy {
            RankPolicy::Uniform { rank } => Ok(vec![rank; p.len()]),
            RankPolicy::Proportional {
                total_rank,
                fixed_specific_rank,
            } => match fixed_specific_rank {
                Some(r) if tasks > 1 && p.is_all_singletons() => Ok(vec![r; p.len()]),
                _ => {
                    let sizes: Vec<usize> = p.groups().iter().map(Vec::len).collect();
                    allocate_ranks(total_rank, &sizes)
                }
            },
        })
        .collect()
}

/// Frozen weights of the stem and every block, without adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneWeights {
    pub stem: (Tensor, Tensor),
    /// `[stage][layer]` → (weight, bias)
    pub blocks: Vec<Vec<(Tensor, Tensor)>>,
}

impl BackboneWeights {
    /// Weights `N(0, 1/fan_in)`, biases `N(0, 0.01)`, from `seed`.
    pub fn generate(cfg: &NetworkConfig, seed: u64) -> Self {
        let lin = |label: String, out: usize, inp: usize| {
            let mut rng = rng_from(seed, &label);
            let w = Tensor::new(vec![out, inp], normal_vec(&mut rng, out * inp, (1.0 / inp as f64).sqrt()))
                .expect("shape");
            let b = Tensor::new(vec![out], normal_vec(&mut rng, out, 0.1)).expect("shape");
            (w, b)
        };
        let d = cfg.hidden_dim;
        Self {
            stem: lin("backbone.stem".into(), d, cfg.input_dim),
            blocks: (0..cfg.stage_count)
                .map(|s| {
                    (0..LAYERS_PER_STAGE)
                        .map(|l| lin(format!("backbone.s{s}.l{l}"), d, d))
                        .collect()
                })
                .collect(),
        }
    }

    pub fn stem_forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.linear(&self.stem.0, Some(&self.stem.1))?.map(crate::autodiff::gelu_scalar))
    }

    pub fn block_forward(&self, stage: usize, h: &Tensor) -> Result<Tensor> {
        let layers = &self.blocks[stage];
        let u = h.linear(&layers[0].0, Some(&layers[0].1))?;
        let v = u.map(crate::autodiff::gelu_scalar);
        let w = v.linear(&layers[1].0, Some(&layers[1].1))?;
        h.add(&w)
    }

    /// Frozen forward pass with no adapters: the representation every task
    /// sees before adaptation.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.stem_forward(x)?;
        for s in 0..self.blocks.len() {
            h = self.block_forward(s, &h)?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
pub struct Head {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub layers: Vec<TgLoraLayer>,
    /// Parent group index in the previous stage for each group.
    pub parents: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct BranchedNetwork {
    pub config: NetworkConfig,
    pub tree: TaskTree,
    pub policy: RankPolicy,
    pub task_names: Vec<String>,
    pub head_outputs: Vec<usize>,
    pub store: ParamStore,
    stem: (ParamId, ParamId),
    pub stages: Vec<Stage>,
    pub heads: Vec<Head>,
}

/// Per-task outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct MultiTaskOutput {
    /// Head input (final-stage stream) of each task.
    pub features: Vec<NodeId>,
    /// Head output of each task.
    pub predictions: Vec<NodeId>,
    /// Streams leaving each stage, one per group.
    pub stage_streams: Vec<Vec<NodeId>>,
}

impl BranchedNetwork {
    /// Builds a network for `tree` whose frozen weights come from
    /// `config.backbone_seed` and whose adapters and heads come from `seed`.
    ///
    /// Random streams are keyed by task names, so a group's adapters depend
    /// on which tasks it holds and not on its position.
    pub fn build(
        config: &NetworkConfig,
        tree: &TaskTree,
        policy: RankPolicy,
        task_names: &[String],
        head_outputs: &[usize],
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let t = task_names.len();
        if head_outputs.len() != t || head_outputs.contains(&0) {
            return Err(Error::Config(format!(
                "{} head output sizes for {t} tasks",
                head_outputs.len()
            )));
        }
        if tree.stage_count() != config.stage_count {
            return Err(Error::InvalidTree(format!(
                "tree has {} stages, network has {}",
                tree.stage_count(),
                config.stage_count
            )));
        }
        let violations = validate_tree(tree, t);
        if !violations.is_empty() {
            let v: Vec<String> = violations.iter().map(ToString::to_string).collect();
            return Err(Error::InvalidTree(v.join("; ")));
        }
        let ranks = plan_ranks(tree, policy)?;
        let backbone = BackboneWeights::generate(config, config.backbone_seed);
        let mut store = ParamStore::new();
        let stem = (
            store.insert("stem.weight", backbone.stem.0.clone(), true)?,
            store.insert("stem.bias", backbone.stem.1.clone(), true)?,
        );
        let mut stages = Vec::with_capacity(config.stage_count);
        for (s, partition) in tree.stages.iter().enumerate() {
            let alphas = vec![config.alpha; partition.len()];
            let mut layers = Vec::with_capacity(LAYERS_PER_STAGE);
            for (l, (w, b)) in backbone.blocks[s].iter().enumerate() {
                let name = format!("s{s}.l{l}");
                let layer = TgLoraLayer::init(
                    &mut store,
                    &name,
                    w.clone(),
                    Some(b.clone()),
                    &ranks[s],
                    &alphas,
                    |gi| {
                        let members: Vec<&str> = partition.groups()[gi]
                            .iter()
                            .map(|&task| task_names[task].as_str())
                            .collect();
                        rng_from(seed, &format!("adapter.{name}.{}", members.join("+")))
                    },
                )?;
                layers.push(layer);
            }
            stages.push(Stage {
                layers,
                parents: tree.parents(s)?,
            });
        }
        let d = config.hidden_dim;
        let hh = config.head_hidden;
        let mut heads = Vec::with_capacity(t);
        for (name, &out) in task_names.iter().zip(head_outputs) {
            let mut rng = rng_from(seed, &format!("head.{name}"));
            let w1 = Tensor::new(vec![hh, d], normal_vec(&mut rng, hh * d, (1.0 / d as f64).sqrt()))?;
            let w2 = Tensor::new(vec![out, hh], normal_vec(&mut rng, out * hh, (1.0 / hh as f64).sqrt()))?;
            heads.push(Head {
                w1: store.insert(format!("head.{name}.w1"), w1, false)?,
                b1: store.insert(format!("head.{name}.b1"), Tensor::zeros(&[hh]), false)?,
                w2: store.insert(format!("head.{name}.w2"), w2, false)?,
                b2: store.insert(format!("head.{name}.b2"), Tensor::zeros(&[out]), false)?,
            });
        }
        Ok(Self {
            config: config.clone(),
            tree: tree.clone(),
            policy,
            task_names: task_names.to_vec(),
            head_outputs: head_outputs.to_vec(),
            store,
            stem,
            stages,
            heads,
        })
    }

    pub fn task_count(&self) -> usize {
        self.task_names.len()
    }

    pub fn trainable_count(&self) -> usize {
        self.store.trainable_count()
    }

    pub fn adapter_param_count(&self) -> usize {
        self.stages
            .iter()
            .flat_map(|s| &s.layers)
            .map(TgLoraLayer::trainable_count)
            .sum()
    }

    pub fn head_param_count(&self) -> usize {
        self.heads
            .iter()
            .map(|h| {
                [h.w1, h.b1, h.w2, h.b2]
                    .iter()
                    .map(|&id| self.store.value(id).len())
                    .sum::<usize>()
            })
            .sum()
    }

    /// Names of the frozen backbone weights (stem and base linear maps).
    pub fn is_shared_param(name: &str) -> bool {
        !name.starts_with("head.") && !name.contains(".lora_")
    }

    pub fn is_head_param(name: &str) -> bool {
        name.starts_with("head.")
    }

    pub fn is_adapter_param(name: &str) -> bool {
        name.contains(".lora_")
    }

    /// Hash of every frozen backbone value.
    pub fn backbone_hash(&self) -> String {
        self.store.hash_values(Self::is_shared_param)
    }

    /// Freezes or unfreezes all adapter matrices.
    pub fn set_adapters_frozen(&mut self, frozen: bool) {
        let ids: Vec<ParamId> = self
            .store
            .iter()
            .filter(|(_, p)| Self::is_adapter_param(&p.name))
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            self.store.set_frozen(id, frozen);
        }
    }

    /// Runs the full branched forward pass on a batch `x[n×input_dim]`.
    pub fn forward(&self, g: &mut Graph, x: NodeId, ctx: &mut ForwardCtx<'_>) -> Result<MultiTaskOutput> {
        let store = &self.store;
        let sw = ctx.bind(g, store, self.stem.0);
        let sb = ctx.bind(g, store, self.stem.1);
        let h = g.matmul_t(x, sw)?;
        let h = g.add(h, sb)?;
        let mut streams = vec![g.gelu(h)];
        let mut stage_streams = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let mut fanout = vec![0usize; streams.len()];
            for &p in &stage.parents {
                *fanout.get_mut(p).ok_or_else(|| {
                    Error::Routing(format!("parent stream {p} of {} missing", streams.len()))
                })? += 1;
            }
            let inputs: Vec<NodeId> = stage
                .parents
                .iter()
                .map(|&p| if fanout[p] > 1 { g.copy(streams[p]) } else { streams[p] })
                .collect();
            let u = stage.layers[0].forward(g, store, &inputs, ctx)?;
            let v: Vec<NodeId> = u.into_iter().map(|n| g.gelu(n)).collect();
            let w = stage.layers[1].forward(g, store, &v, ctx)?;
            streams = inputs
                .iter()
                .zip(w)
                .map(|(&h, w)| g.add(h, w))
                .collect::<Result<_>>()?;
            stage_streams.push(streams.clone());
        }
        let last = self
            .tree
            .stages
            .last()
            .ok_or_else(|| Error::InvalidTree("no stages".into()))?;
        let mut features = Vec::with_capacity(self.heads.len());
        let mut predictions = Vec::with_capacity(self.heads.len());
        for (t, head) in self.heads.iter().enumerate() {
            let gi = last
                .group_of(t)
                .ok_or_else(|| Error::Routing(format!("task {t} has no final-stage group")))?;
            let f = streams[gi];
            features.push(f);
            predictions.push(self.head_forward(g, head, f, ctx)?);
        }
        Ok(MultiTaskOutput {
            features,
            predictions,
            stage_streams,
        })
    }

    fn head_forward(&self, g: &mut Graph, head: &Head, f: NodeId, ctx: &ForwardCtx<'_>) -> Result<NodeId> {
        let s = &self.store;
        let (w1, b1, w2, b2) = (
            ctx.bind(g, s, head.w1),
            ctx.bind(g, s, head.b1),
            ctx.bind(g, s, head.w2),
            ctx.bind(g, s, head.b2),
        );
        let z = g.matmul_t(f, w1)?;
        let z = g.add(z, b1)?;
        let z = g.gelu(z);
        let z = g.matmul_t(z, w2)?;
        g.add(z, b2)
    }

    /// Evaluation-mode predictions for `x`, one tensor per task.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let out = self.forward(&mut g, xn, &mut ForwardCtx::eval())?;
        Ok(out.predictions.iter().map(|&n| g.value(n).clone()).collect())
    }

    /// Evaluation-mode head inputs for `x`, one tensor per task.
    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let out = self.forward(&mut g, xn, &mut ForwardCtx::eval())?;
        Ok(out.features.iter().map(|&n| g.value(n).clone()).collect())
    }

    /// The layout the cost model needs.
    pub fn shape(&self) -> NetworkShape {
        NetworkShape {
            input_dim: self.config.input_dim,
            hidden_dim: self.config.hidden_dim,
            head_hidden: self.config.head_hidden,
            head_outputs: self.head_outputs.clone(),
            stage_ranks: self.stages.iter().map(|s| s.layers[0].ranks()).collect(),
            stem_streams: 1,
        }
    }
}

/// Dimensions, per-stage group ranks, and head sizes of a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkShape {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub head_hidden: usize,
    pub head_outputs: Vec<usize>,
    /// `[stage][group]` adapter rank, shared by both layers of a block.
    pub stage_ranks: Vec<Vec<usize>>,
    /// How many times the frozen stem runs per input.
    pub stem_streams: usize,
}

impl NetworkShape {
    pub fn from_tree(config: &NetworkConfig, tree: &TaskTree, policy: RankPolicy, head_outputs: &[usize]) -> Result<Self> {
        Ok(Self {
            input_dim: config.input_dim,
            hidden_dim: config.hidden_dim,
            head_hidden: config.head_hidden,
            head_outputs: head_outputs.to_vec(),
            stage_ranks: plan_ranks(tree, policy)?,
            stem_streams: 1,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::Partition;

    fn names(t: usize) -> Vec<String> {
        (0..t).map(|i| format!("t{i}")).collect()
    }

    fn small() -> NetworkConfig {
        NetworkConfig {
            input_dim: 3,
            hidden_dim: 5,
            stage_count: 2,
            head_hidden: 4,
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn invalid_tree_refused() {
        let tree = TaskTree::new(vec![Partition::singletons(3), Partition::single_group(3)]);
        let err = BranchedNetwork::build(&small(), &tree, RankPolicy::Uniform { rank: 1 }, &names(3), &[1; 3], 0)
            .unwrap_err();
        assert!(matches!(err, Error::InvalidTree(_)));
    }

    #[test]
    fn plan_ranks_fixed_specific_stage() {
        let tree = TaskTree::new(vec![
            Partition::single_group(4),
            Partition::new(vec![vec![0, 1], vec![2, 3]], 4).unwrap(),
            Partition::singletons(4),
        ]);
        let plan = plan_ranks(&tree, RankPolicy::proportional(8)).unwrap();
        assert_eq!(plan, vec![vec![8], vec![4, 4], vec![4, 4, 4, 4]]);
        let plan = plan_ranks(&tree, RankPolicy::Uniform { rank: 2 }).unwrap();
        assert_eq!(plan[2], vec![2; 4]);
    }

    #[test]
    fn trainable_count_is_adapters_plus_heads() {
        let tree = TaskTree::shared(2, 2);
        let net = BranchedNetwork::build(&small(), &tree, RankPolicy::Uniform { rank: 2 }, &names(2), &[1, 3], 0)
            .unwrap();
        // 2 stages × 2 layers × r(d + k) = 4 · 2 · 10
        assert_eq!(net.adapter_param_count(), 80);
        // heads: 4·5 + 4 + (1·4 + 1) and 4·5 + 4 + (3·4 + 3)
        assert_eq!(net.head_param_count(), 29 + 39);
        assert_eq!(net.trainable_count(), 80 + 68);
    }
}
