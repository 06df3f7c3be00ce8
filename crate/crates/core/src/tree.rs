//! Task partitions and the per-stage task tree.
//!
//! Task ids are `0..T`. A [`TaskTree`] lists one [`Partition`] per backbone
//! stage, input side first. A valid tree never has fewer groups in a later
//! stage and every later group sits inside exactly one earlier group, so
//! the stages form a refinement chain ending at the task heads.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Disjoint task groups covering every task once. Group order is
/// significant: it is the stream and adapter-module order of a stage.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Partition {
    groups: Vec<Vec<usize>>,
}

impl Partition {
    /// Validates `groups` as a partition of `0..task_count`, keeping order.
    pub fn new(groups: Vec<Vec<usize>>, task_count: usize) -> Result<Self> {
        let p = Self { groups };
        let problems = p.problems(task_count);
        if problems.is_empty() {
            Ok(p)
        } else {
            Err(Error::InvalidPartition(problems.join("; ")))
        }
    }

    pub(crate) fn from_groups_unchecked(groups: Vec<Vec<usize>>) -> Self {
        Self { groups }
    }

    pub fn single_group(task_count: usize) -> Self {
        Self {
            groups: vec![(0..task_count).collect()],
        }
    }

    pub fn singletons(task_count: usize) -> Self {
        Self {
            groups: (0..task_count).map(|t| vec![t]).collect(),
        }
    }

    /// Builds a partition from a restricted-growth string: task `t` goes to
    /// group `labels[t]`.
    pub fn from_labels(labels: &[usize]) -> Self {
        let k = labels.iter().copied().max().map_or(0, |m| m + 1);
        let mut groups = vec![Vec::new(); k];
        for (t, &l) in labels.iter().enumerate() {
            groups[l].push(t);
        }
        groups.retain(|g| !g.is_empty());
        Self { groups }.canonical()
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn task_count(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    /// Index of the group holding `task`.
    pub fn group_of(&self, task: usize) -> Option<usize> {
        self.groups.iter().position(|g| g.contains(&task))
    }

    pub fn is_all_singletons(&self) -> bool {
        self.groups.iter().all(|g| g.len() == 1)
    }

    /// Members sorted, groups ordered by smallest member.
    pub fn canonical(&self) -> Self {
        let mut groups: Vec<Vec<usize>> = self
            .groups
            .iter()
            .map(|g| {
                let mut g = g.clone();
                g.sort_unstable();
                g
            })
            .collect();
        groups.sort();
        Self { groups }
    }

    /// Every way `self` fails to partition `0..task_count`.
    pub fn problems(&self, task_count: usize) -> Vec<String> {
        let mut out = Vec::new();
        let mut seen = vec![0usize; task_count];
        for (gi, g) in self.groups.iter().enumerate() {
            if g.is_empty() {
                out.push(format!("group {gi} is empty"));
            }
            for &t in g {
                match seen.get_mut(t) {
                    Some(c) => *c += 1,
                    None => out.push(format!("task {t} out of range 0..{task_count}")),
                }
            }
        }
        for (t, &c) in seen.iter().enumerate() {
            match c {
                0 => out.push(format!("task {t} missing")),
                1 => {}
                _ => out.push(format!("task {t} appears {c} times")),
            }
        }
        out
    }

    /// Relabels tasks through `perm` (task `t` becomes `perm[t]`).
    pub fn relabeled(&self, perm: &[usize]) -> Self {
        Self {
            groups: self
                .groups
                .iter()
                .map(|g| g.iter().map(|&t| perm[t]).collect())
                .collect(),
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .groups
            .iter()
            .map(|g| {
                let ids: Vec<String> = g.iter().map(ToString::to_string).collect();
                format!("{{{}}}", ids.join(","))
            })
            .collect();
        write!(f, "[{}]", parts.join(" "))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskTree {
    pub stages: Vec<Partition>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    /// The stage is not a partition of the task set.
    Partition { stage: usize, detail: String },
    /// Fewer groups than the preceding stage.
    Monotonicity { stage: usize, groups: usize, previous: usize },
    /// A group spans several groups of the preceding stage.
    Refinement { stage: usize, group: Vec<usize> },
    Empty,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Partition { stage, detail } => write!(f, "stage {stage}: {detail}"),
            Violation::Monotonicity {
                stage,
                groups,
                previous,
            } => write!(
                f,
                "stage {stage}: {groups} groups after {previous} (groups merged toward the heads)"
            ),
            Violation::Refinement { stage, group } => {
                write!(f, "stage {stage}: group {group:?} spans several groups of stage {}", stage - 1)
            }
            Violation::Empty => write!(f, "tree has no stages"),
        }
    }
}

impl TaskTree {
    pub fn new(stages: Vec<Partition>) -> Self {
        Self { stages }
    }

    pub fn uniform(stage_count: usize, partition: Partition) -> Self {
        Self {
            stages: vec![partition; stage_count],
        }
    }

    pub fn shared(stage_count: usize, task_count: usize) -> Self {
        Self::uniform(stage_count, Partition::single_group(task_count))
    }

    pub fn individual(stage_count: usize, task_count: usize) -> Self {
        Self::uniform(stage_count, Partition::singletons(task_count))
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    pub fn task_count(&self) -> usize {
        self.stages.first().map_or(0, Partition::task_count)
    }

    pub fn group_counts(&self) -> Vec<usize> {
        self.stages.iter().map(Partition::len).collect()
    }

    /// For each group of `stage`, the index of its parent group in the
    /// previous stage. Stage 0 groups all have parent 0 (the stem).
    pub fn parents(&self, stage: usize) -> Result<Vec<usize>> {
        if stage == 0 {
            return Ok(vec![0; self.stages[0].len()]);
        }
        let prev = &self.stages[stage - 1];
        self.stages[stage]
            .groups()
            .iter()
            .map(|g| {
                let owner = g.first().and_then(|&t| prev.group_of(t));
                match owner {
                    Some(o) if g.iter().all(|&t| prev.group_of(t) == Some(o)) => Ok(o),
                    _ => Err(Error::Routing(format!(
                        "group {g:?} at stage {stage} has no unique parent"
                    ))),
                }
            })
            .collect()
    }

    /// The group index holding `task` at each stage.
    pub fn path(&self, task: usize) -> Option<Vec<usize>> {
        self.stages.iter().map(|p| p.group_of(task)).collect()
    }

    pub fn canonical(&self) -> Self {
        Self {
            stages: self.stages.iter().map(Partition::canonical).collect(),
        }
    }

    pub fn relabeled(&self, perm: &[usize]) -> Self {
        Self {
            stages: self.stages.iter().map(|p| p.relabeled(perm)).collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("tree serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::format("task tree", e))
    }
}

/// Lists every monotonicity and refinement violation of `tree` for a task
/// set of size `task_count`. An empty list means the tree is valid.
pub fn validate_tree(tree: &TaskTree, task_count: usize) -> Vec<Violation> {
    let mut out = Vec::new();
    if tree.stages.is_empty() {
        out.push(Violation::Empty);
        return out;
    }
    let mut partition_ok = vec![true; tree.stages.len()];
    for (s, p) in tree.stages.iter().enumerate() {
        for detail in p.problems(task_count) {
            partition_ok[s] = false;
            out.push(Violation::Partition { stage: s, detail });
        }
    }
    for s in 1..tree.stages.len() {
        let (prev, cur) = (&tree.stages[s - 1], &tree.stages[s]);
        if cur.len() < prev.len() {
            out.push(Violation::Monotonicity {
                stage: s,
                groups: cur.len(),
                previous: prev.len(),
            });
        }
        if !(partition_ok[s - 1] && partition_ok[s]) {
            continue;
        }
        for g in cur.groups() {
            let owners: BTreeSet<Option<usize>> = g.iter().map(|&t| prev.group_of(t)).collect();
            if owners.len() != 1 {
                out.push(Violation::Refinement {
                    stage: s,
                    group: g.clone(),
                });
            }
        }
    }
    out
}

/// Per-stage group counts from a stage count and task count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub counts: Vec<usize>,
    /// Set when a single stage must be both shared and task-specific; the
    /// task-specific rule wins.
    pub degenerate: bool,
}

/// Last stage task-specific, one group fewer per stage toward the input,
/// never below one, first stage shared.
pub fn schedule_groups(stage_count: usize, task_count: usize) -> Schedule {
    let s = stage_count.max(1);
    let t = task_count.max(1);
    let mut counts = vec![0; s];
    counts[s - 1] = t;
    for i in (0..s - 1).rev() {
        counts[i] = counts[i + 1].saturating_sub(1).max(1);
    }
    let degenerate = s == 1 && t > 1;
    if s > 1 {
        counts[0] = 1;
    }
    Schedule { counts, degenerate }
}

/// Checks that `counts` is usable as a schedule for `task_count` tasks.
pub fn check_schedule(counts: &[usize], task_count: usize) -> Result<()> {
    if counts.is_empty() {
        return Err(Error::Config("empty schedule".into()));
    }
    if let Some(&c) = counts.iter().find(|&&c| c == 0 || c > task_count) {
        return Err(Error::Config(format!(
            "group count {c} outside 1..={task_count} in schedule {counts:?}"
        )));
    }
    if counts.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Config(format!(
            "schedule {counts:?} decreases toward the heads"
        )));
    }
    Ok(())
}
