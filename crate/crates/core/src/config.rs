//! Experiment configuration read from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifacts::{canonical_json, sha256_hex};
use crate::cost::CostMode;
use crate::error::{Error, Result};
use crate::grouping::SearchMode;
use crate::network::{NetworkConfig, RankPolicy};
use crate::similarity::{HeadTuning, DEFAULT_EXAMPLES};
use crate::synthetic::TaskGenerator;
use crate::trainer::{RunMode, TrainConfig};
use crate::tree::{check_schedule, schedule_groups, validate_tree, Partition, TaskTree};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_val: usize,
    /// Task names; `t0, t1, …` when empty.
    pub task_names: Vec<String>,
    pub generator: TaskGenerator,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_train: 256,
            n_val: 256,
            task_names: Vec::new(),
            generator: TaskGenerator::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Adapter rank per layer, split across the groups of a stage.
    pub total_rank: usize,
    /// Rank of each single-task group at fully task-specific stages;
    /// `None` splits `total_rank` there too.
    pub specific_rank: Option<usize>,
    pub network: NetworkConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            total_rank: 8,
            specific_rank: Some(4),
            network: NetworkConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn policy(&self) -> RankPolicy {
        RankPolicy::Proportional {
            total_rank: self.total_rank,
            fixed_specific_rank: self.specific_rank,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimilarityConfig {
    pub examples: usize,
    pub tuning: HeadTuning,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        Self {
            examples: DEFAULT_EXAMPLES,
            tuning: HeadTuning::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroupingConfig {
    /// Per-stage group counts; derived from the stage and task counts when
    /// absent.
    pub schedule: Option<Vec<usize>>,
    /// Fixed per-stage partitions used instead of the similarity search.
    pub groups: Option<Vec<Partition>>,
    pub search: SearchMode,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Names of the two tasks to exchange.
    pub swap: Option<[String; 2]>,
    /// Stages at which to exchange them; every stage when absent.
    pub stages: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostConfig {
    /// Extra schedules for the cost scan.
    pub schedules: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    pub modes: Vec<RunMode>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub similarity: SimilarityConfig,
    pub grouping: GroupingConfig,
    pub train: TrainConfig,
    pub ablation: AblationConfig,
    pub cost: CostConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            seeds: vec![0, 1, 2],
            modes: vec![RunMode::Individual, RunMode::Shared, RunMode::Progressive],
            data: DataConfig::default(),
            model: ModelConfig::default(),
            similarity: SimilarityConfig::default(),
            grouping: GroupingConfig::default(),
            train: TrainConfig::default(),
            ablation: AblationConfig {
                swap: Some(["t1".into(), "t2".into()]),
                stages: None,
            },
            cost: CostConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&crate::artifacts::read_text(path)?)
    }

    pub fn task_count(&self) -> usize {
        self.data.generator.task_count()
    }

    pub fn task_names(&self) -> Vec<String> {
        if self.data.task_names.is_empty() {
            (0..self.task_count()).map(|i| format!("t{i}")).collect()
        } else {
            self.data.task_names.clone()
        }
    }

    pub fn head_outputs(&self) -> Vec<usize> {
        self.data.generator.kinds().iter().map(|k| k.outputs()).collect()
    }

    pub fn task_index(&self, name: &str) -> Result<usize> {
        self.task_names()
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Config(format!("unknown task `{name}`")))
    }

    /// The schedule override or the default one.
    pub fn schedule(&self) -> Vec<usize> {
        self.grouping
            .schedule
            .clone()
            .unwrap_or_else(|| schedule_groups(self.model.network.stage_count, self.task_count()).counts)
    }

    /// Every schema error at once, joined.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut check = |r: Result<()>| {
            if let Err(e) = r {
                errs.push(e.to_string());
            }
        };
        check(self.model.network.validate());
        check(self.data.generator.validate());
        let t = self.task_count();
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            errs.push(format!("experiment name `{}` is not a plain directory name", self.name));
        }
        if self.seeds.is_empty() {
            errs.push("seeds must not be empty".into());
        }
        if !self.data.task_names.is_empty() {
            let names = &self.data.task_names;
            if names.len() != t {
                errs.push(format!("{} task names for {t} tasks", names.len()));
            }
            let mut sorted = names.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != names.len() || names.iter().any(|n| n.is_empty() || n.contains([',', '/', '"'])) {
                errs.push("task names must be unique, non-empty and free of `,`, `/` and `\"`".into());
            }
        }
        if self.data.n_train == 0 || self.data.n_val == 0 {
            errs.push("n_train and n_val must be positive".into());
        }
        if self.similarity.examples == 0 || self.similarity.examples > self.data.n_train {
            errs.push(format!(
                "similarity examples {} outside 1..={}",
                self.similarity.examples, self.data.n_train
            ));
        }
        if self.model.total_rank == 0 || self.model.total_rank > self.model.network.hidden_dim {
            errs.push(format!("total_rank {} outside 1..={}", self.model.total_rank, self.model.network.hidden_dim));
        }
        if self.model.specific_rank == Some(0) {
            errs.push("specific_rank must be positive".into());
        }
        if self.train.batch_size == 0 {
            errs.push("batch_size must be positive".into());
        }
        let s = self.model.network.stage_count;
        let sched = self.schedule();
        if let Err(e) = check_schedule(&sched, t) {
            errs.push(e.to_string());
        } else if sched.len() != s {
            errs.push(format!("schedule has {} entries for {s} stages", sched.len()));
        }
        if let Some(groups) = &self.grouping.groups {
            let tree = TaskTree::new(groups.clone());
            if tree.stage_count() != s {
                errs.push(format!("group override has {} stages, network has {s}", tree.stage_count()));
            }
            errs.extend(validate_tree(&tree, t).iter().map(|v| format!("group override: {v}")));
        }
        if let Some([a, b]) = &self.ablation.swap {
            for n in [a, b] {
                if !self.task_names().contains(n) {
                    errs.push(format!("ablation swaps unknown task `{n}`"));
                }
            }
        }
        if let Some(st) = &self.ablation.stages {
            if st.iter().any(|&i| i >= s) {
                errs.push(format!("ablation stages {st:?} outside 0..{s}"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }

    pub fn canonical_json(&self) -> Result<String> {
        canonical_json(self)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.canonical_json()?.as_bytes()))
    }

    /// Schedules of the cost scan: the configured one, the shared and
    /// task-specific extremes, and any extras.
    pub fn scan_schedules(&self) -> Vec<Vec<usize>> {
        let s = self.model.network.stage_count;
        let t = self.task_count();
        let mut out = vec![self.schedule(), vec![1; s], vec![t; s]];
        for extra in &self.cost.schedules {
            if !out.contains(extra) {
                out.push(extra.clone());
            }
        }
        out.dedup();
        out
    }
}

/// Modes accepted on the command line for cost reports.
pub fn cost_mode(mode: RunMode) -> Option<CostMode> {
    match mode {
        RunMode::Individual => Some(CostMode::Individual),
        RunMode::Shared => Some(CostMode::Shared),
        RunMode::Progressive => Some(CostMode::Progressive),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_toml_is_default() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_toml("nmae = \"x\"").is_err());
        assert!(ExperimentConfig::from_toml("[model]\ntotal_rnak = 3").is_err());
        assert!(ExperimentConfig::from_toml("[model.network]\nhidden = 3").is_err());
    }

    #[test]
    fn nested_values_parse() {
        let cfg = ExperimentConfig::from_toml(
            r#"
            name = "small"
            seeds = [4]
            modes = ["shared", "ablate-swap"]
            [model]
            total_rank = 4
            [model.network]
            stage_count = 3
            [grouping]
            schedule = [1, 2, 4]
            [train]
            epochs = 3
            [train.schedule]
            kind = "warmup_cosine"
            warmup_epochs = 1
            "#,
        )
        .unwrap();
        assert_eq!(cfg.model.network.stage_count, 3);
        assert_eq!(cfg.schedule(), vec![1, 2, 4]);
        assert_eq!(cfg.modes, vec![RunMode::Shared, RunMode::AblateSwap]);
    }

    #[test]
    fn semantic_errors_listed() {
        let err = ExperimentConfig::from_toml("seeds = []\n[grouping]\nschedule = [3, 1, 1, 1]").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("seeds") && msg.contains("decreases"), "{msg}");
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.train.epochs += 1;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }
}
