//! Partition scoring, exact search, greedy merging and tree assembly.
//!
//! A task's score inside a group is its mean similarity to the other
//! members (0 alone); a partition scores the sum over tasks. Trees are
//! built from the heads backwards: the last stage is searched or set to
//! singletons, and each earlier stage merges the next one down to its
//! group count.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::similarity::SimilarityMatrix;
use crate::tree::{check_schedule, validate_tree, Partition, TaskTree};

/// Largest task count accepted by exhaustive search.
pub const MAX_EXACT_TASKS: usize = 12;

/// Scores within this relative distance count as tied.
const TIE_TOL: f64 = 1e-12;

fn tied(a: f64, b: f64) -> bool {
    (a - b).abs() <= TIE_TOL * a.abs().max(b.abs()).max(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionScore {
    pub partition: Partition,
    /// Score of each task, indexed by task id.
    pub task_scores: Vec<f64>,
    pub total: f64,
}

/// Scores `p`. Summation runs over tasks in id order and over group mates
/// in id order, so equal partitions score bitwise equal.
pub fn partition_score(sim: &SimilarityMatrix, p: &Partition) -> Result<PartitionScore> {
    let t = sim.task_count();
    let problems = p.problems(t);
    if !problems.is_empty() {
        return Err(Error::InvalidPartition(problems.join("; ")));
    }
    let canon = p.canonical();
    let mut task_scores = vec![0.0; t];
    for g in canon.groups() {
        if g.len() < 2 {
            continue;
        }
        for &a in g {
            let s: f64 = g.iter().filter(|&&b| b != a).map(|&b| sim.get(a, b)).sum();
            task_scores[a] = s / (g.len() - 1) as f64;
        }
    }
    Ok(PartitionScore {
        partition: p.clone(),
        total: task_scores.iter().sum(),
        task_scores,
    })
}

/// Group-count constraint of the exact search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchMode {
    /// Exactly the requested number of groups.
    #[default]
    CountConstrained,
    /// Any number of groups.
    Unconstrained,
}

/// A search or merge result with the number of tied decisions it broke.
#[derive(Debug, Clone, PartialEq)]
pub struct Chosen {
    pub partition: Partition,
    pub score: f64,
    pub tie_breaks: usize,
}

/// Calls `f` with every restricted-growth string of length `n`, in
/// lexicographic order. With `groups = Some(m)` only strings using exactly
/// `m` labels are visited.
pub fn for_each_rgs(n: usize, groups: Option<usize>, mut f: impl FnMut(&[usize])) {
    if n == 0 {
        return;
    }
    fn rec(a: &mut Vec<usize>, used: usize, n: usize, want: Option<usize>, f: &mut dyn FnMut(&[usize])) {
        if a.len() == n {
            if want.is_none_or(|m| m == used) {
                f(a);
            }
            return;
        }
        let left = n - a.len();
        for l in 0..=used {
            let u = used.max(l + 1);
            if let Some(m) = want {
                if u > m || u + left - 1 < m {
                    continue;
                }
            }
            a.push(l);
            rec(a, u, n, want, f);
            a.pop();
        }
    }
    let mut a = Vec::with_capacity(n);
    a.push(0);
    rec(&mut a, 1, n, groups, &mut f);
}

/// Keeps the best candidate; ties go to the smaller canonical form.
struct Best {
    best: Option<(f64, Partition)>,
    ties: usize,
}

impl Best {
    fn new() -> Self {
        Self { best: None, ties: 0 }
    }

    fn offer(&mut self, score: f64, p: Partition) {
        match &self.best {
            None => self.best = Some((score, p)),
            Some((s, q)) => {
                if tied(score, *s) {
                    self.ties += 1;
                    if p < *q {
                        self.best = Some((score, p));
                    }
                } else if score > *s {
                    self.best = Some((score, p));
                    self.ties = 0;
                }
            }
        }
    }

    fn finish(self) -> Option<Chosen> {
        self.best.map(|(score, partition)| Chosen {
            partition,
            score,
            tie_breaks: usize::from(self.ties > 0),
        })
    }
}

/// Highest-scoring partition by exhaustive enumeration, in canonical form.
pub fn best_partition(sim: &SimilarityMatrix, groups: usize, mode: SearchMode) -> Result<Chosen> {
    let t = sim.task_count();
    if t > MAX_EXACT_TASKS {
        return Err(Error::Capacity {
            tasks: t,
            limit: MAX_EXACT_TASKS,
        });
    }
    if mode == SearchMode::CountConstrained && !(1..=t).contains(&groups) {
        return Err(Error::Contract(format!("group count {groups} outside 1..={t}")));
    }
    let want = (mode == SearchMode::CountConstrained).then_some(groups);
    let mut best = Best::new();
    let mut err = None;
    for_each_rgs(t, want, |labels| {
        let p = Partition::from_labels(labels);
        match partition_score(sim, &p) {
            Ok(s) => best.offer(s.total, p),
            Err(e) => err = Some(e),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    best.finish().ok_or_else(|| Error::Contract("no partition enumerated".into()))
}

/// All partitions obtainable from `q` by merging one pair of groups, with
/// their scores, in canonical pair order.
pub fn single_merges(sim: &SimilarityMatrix, q: &Partition) -> Result<Vec<(Partition, f64)>> {
    let q = q.canonical();
    let g = q.groups();
    let mut out = Vec::new();
    for i in 0..g.len() {
        for j in i + 1..g.len() {
            let mut groups: Vec<Vec<usize>> = Vec::with_capacity(g.len() - 1);
            for (k, grp) in g.iter().enumerate() {
                if k == i {
                    groups.push(grp.iter().chain(&g[j]).copied().collect());
                } else if k != j {
                    groups.push(grp.clone());
                }
            }
            let cand = Partition::from_groups_unchecked(groups).canonical();
            let s = partition_score(sim, &cand)?.total;
            out.push((cand, s));
        }
    }
    Ok(out)
}

/// Greedily merges pairs of groups of `p` until `n` remain, each time
/// taking the merge whose resulting partition scores highest. Ties go to
/// the first pair in canonical order.
pub fn merge_task_groups(sim: &SimilarityMatrix, p: &Partition, n: usize) -> Result<Chosen> {
    let problems = p.problems(sim.task_count());
    if !problems.is_empty() {
        return Err(Error::InvalidPartition(problems.join("; ")));
    }
    if n < 1 {
        return Err(Error::Contract("cannot merge to fewer than one group".into()));
    }
    if n >= p.len() {
        return Err(Error::Contract(format!("target {n} groups but partition has {}", p.len())));
    }
    let mut q = p.canonical();
    let mut tie_breaks = 0;
    let mut score = 0.0;
    while q.len() > n {
        let mut best: Option<(Partition, f64)> = None;
        let mut tie = false;
        for (cand, s) in single_merges(sim, &q)? {
            match &best {
                Some((_, b)) if tied(s, *b) => tie = true,
                Some((_, b)) if s < *b => {}
                _ => {
                    tie = false;
                    best = Some((cand, s));
                }
            }
        }
        let (next, s) = best.expect("at least two groups to merge");
        tie_breaks += usize::from(tie);
        q = next;
        score = s;
    }
    Ok(Chosen {
        partition: q,
        score,
        tie_breaks,
    })
}

/// A task tree with the score of each stage.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedTree {
    pub schedule: Vec<usize>,
    pub tree: TaskTree,
    pub scores: Vec<f64>,
    pub tie_breaks: usize,
}

/// Assembles the per-stage tree from the heads backwards. When the last
/// count equals the task count that stage is all singletons; otherwise it
/// is searched under `mode`. Under [`SearchMode::Unconstrained`] earlier
/// counts are capped at the number of groups found.
pub fn compute_tree(sim: &SimilarityMatrix, counts: &[usize], mode: SearchMode) -> Result<GroupedTree> {
    let t = sim.task_count();
    check_schedule(counts, t)?;
    let last = *counts.last().expect("non-empty schedule");
    let mut tie_breaks = 0;
    let last_partition = if last == t && mode == SearchMode::CountConstrained {
        Partition::singletons(t)
    } else {
        let c = best_partition(sim, last, mode)?;
        tie_breaks += c.tie_breaks;
        c.partition
    };
    let cap = last_partition.len();
    let schedule: Vec<usize> = counts.iter().map(|&c| c.min(cap)).collect();
    let mut stages = vec![last_partition];
    for &c in schedule.iter().rev().skip(1) {
        let next = stages.last().expect("seeded with the last stage");
        let p = if c == next.len() {
            next.clone()
        } else {
            let m = merge_task_groups(sim, next, c)?;
            tie_breaks += m.tie_breaks;
            m.partition
        };
        stages.push(p);
    }
    stages.reverse();
    let tree = TaskTree::new(stages);
    let violations = validate_tree(&tree, t);
    if !violations.is_empty() {
        let v: Vec<String> = violations.iter().map(ToString::to_string).collect();
        return Err(Error::InvalidTree(v.join("; ")));
    }
    let scores = tree
        .stages
        .iter()
        .map(|p| partition_score(sim, p).map(|s| s.total))
        .collect::<Result<_>>()?;
    Ok(GroupedTree {
        schedule,
        tree,
        scores,
        tie_breaks,
    })
}

/// Exchanges tasks `a` and `b` between their groups at the given stages.
/// The result must still be a valid tree.
pub fn swap_tasks(tree: &TaskTree, a: usize, b: usize, stages: &[usize]) -> Result<TaskTree> {
    let t = tree.task_count();
    if a >= t || b >= t || a == b {
        return Err(Error::Config(format!("cannot swap tasks {a} and {b} of {t}")));
    }
    let mut perm: Vec<usize> = (0..t).collect();
    perm.swap(a, b);
    let mut out = tree.clone();
    for &s in stages {
        let p = out
            .stages
            .get(s)
            .ok_or_else(|| Error::Config(format!("stage {s} out of range")))?;
        out.stages[s] = p.relabeled(&perm);
    }
    if out.canonical() == tree.canonical() {
        return Err(Error::Config(format!("tasks {a} and {b} share a group at every chosen stage")));
    }
    let violations = validate_tree(&out, t);
    if !violations.is_empty() {
        let v: Vec<String> = violations.iter().map(ToString::to_string).collect();
        return Err(Error::InvalidTree(format!("swap breaks the tree: {}", v.join("; "))));
    }
    Ok(out)
}

/// Shape of `groups.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupsFile {
    pub schedule: Vec<usize>,
    pub stages: Vec<Partition>,
    pub scores: Vec<f64>,
    pub tie_breaks: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl GroupsFile {
    pub fn from_grouped(g: &GroupedTree) -> Self {
        Self {
            schedule: g.schedule.clone(),
            stages: g.tree.stages.clone(),
            scores: g.scores.clone(),
            tie_breaks: g.tie_breaks,
            seed: None,
            config_hash: None,
        }
    }

    /// Parses and checks that the stages form a valid tree matching the
    /// schedule.
    pub fn from_json(s: &str) -> Result<Self> {
        let f: Self = serde_json::from_str(s).map_err(|e| Error::format("groups.json", e))?;
        f.tree()?;
        Ok(f)
    }

    pub fn tree(&self) -> Result<TaskTree> {
        let tree = TaskTree::new(self.stages.clone());
        let t = self.stages.first().map_or(0, Partition::task_count);
        let violations = validate_tree(&tree, t);
        if !violations.is_empty() {
            let v: Vec<String> = violations.iter().map(ToString::to_string).collect();
            return Err(Error::format("groups.json", v.join("; ")));
        }
        if tree.group_counts() != self.schedule || self.scores.len() != self.stages.len() {
            return Err(Error::format("groups.json", "schedule or scores disagree with stages"));
        }
        Ok(tree)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blocks() -> SimilarityMatrix {
        SimilarityMatrix::from_values(vec![
            vec![1.0, 0.9, 0.1, 0.0],
            vec![0.9, 1.0, 0.05, 0.1],
            vec![0.1, 0.05, 1.0, 0.8],
            vec![0.0, 0.1, 0.8, 1.0],
        ])
        .unwrap()
    }

    fn part(groups: &[&[usize]]) -> Partition {
        Partition::new(groups.iter().map(|g| g.to_vec()).collect(), groups.iter().map(|g| g.len()).sum()).unwrap()
    }

    #[test]
    fn scores_by_hand() {
        let s = blocks();
        assert_eq!(partition_score(&s, &Partition::singletons(4)).unwrap().total, 0.0);
        let two = SimilarityMatrix::from_values(vec![vec![1.0, 0.3], vec![0.3, 1.0]]).unwrap();
        assert!((partition_score(&two, &Partition::single_group(2)).unwrap().total - 0.6).abs() < 1e-15);
        let flat = SimilarityMatrix::from_values(vec![vec![0.25; 4]; 4].into_iter().enumerate().map(|(i, mut r)| {
            r[i] = 1.0;
            r
        }).collect())
        .unwrap();
        assert!((partition_score(&flat, &Partition::single_group(4)).unwrap().total - 1.0).abs() < 1e-15);
        assert!(partition_score(&s, &part(&[&[0, 1], &[2]])).is_err());
    }

    #[test]
    fn rgs_counts_are_stirling_numbers() {
        let count = |n, m| {
            let mut c = 0;
            for_each_rgs(n, m, |_| c += 1);
            c
        };
        assert_eq!(count(4, None), 15);
        assert_eq!(count(4, Some(2)), 7);
        assert_eq!(count(5, Some(3)), 25);
        assert_eq!(count(6, Some(1)), 1);
        assert_eq!(count(6, Some(6)), 1);
    }

    #[test]
    fn best_partition_examples() {
        let s = blocks();
        let c = best_partition(&s, 2, SearchMode::CountConstrained).unwrap();
        assert_eq!(c.partition, part(&[&[0, 1], &[2, 3]]));
        assert_eq!(best_partition(&s, 4, SearchMode::CountConstrained).unwrap().partition, Partition::singletons(4));
        assert_eq!(best_partition(&s, 1, SearchMode::CountConstrained).unwrap().partition, Partition::single_group(4));
        assert!(best_partition(&s, 0, SearchMode::CountConstrained).is_err());
    }

    #[test]
    fn capacity_bound() {
        let n = MAX_EXACT_TASKS + 1;
        let mut v = vec![vec![0.0; n]; n];
        (0..n).for_each(|i| v[i][i] = 1.0);
        let s = SimilarityMatrix::from_values(v).unwrap();
        assert!(matches!(
            best_partition(&s, 2, SearchMode::CountConstrained),
            Err(Error::Capacity { .. })
        ));
    }

    #[test]
    fn ties_pick_smallest_canonical_form() {
        let mut v = vec![vec![0.5; 3]; 3];
        (0..3).for_each(|i| v[i][i] = 1.0);
        let s = SimilarityMatrix::from_values(v).unwrap();
        // [0] sorts before [0, 1]
        let c = best_partition(&s, 2, SearchMode::CountConstrained).unwrap();
        assert_eq!(c.partition, part(&[&[0], &[1, 2]]));
        assert_eq!(c.tie_breaks, 1);
        let m = merge_task_groups(&s, &Partition::singletons(3), 2).unwrap();
        assert_eq!(m.partition, part(&[&[0, 1], &[2]]));
        assert_eq!(m.tie_breaks, 1);
    }

    #[test]
    fn merge_examples() {
        let s = SimilarityMatrix::from_values(vec![
            vec![1.0, 0.9, 0.2],
            vec![0.9, 1.0, 0.1],
            vec![0.2, 0.1, 1.0],
        ])
        .unwrap();
        let m = merge_task_groups(&s, &Partition::singletons(3), 2).unwrap();
        assert_eq!(m.partition, part(&[&[0, 1], &[2]]));
        assert_eq!(merge_task_groups(&s, &Partition::singletons(3), 1).unwrap().partition, Partition::single_group(3));
        assert!(merge_task_groups(&s, &Partition::singletons(3), 3).is_err());
        assert!(merge_task_groups(&s, &Partition::singletons(3), 0).is_err());
    }

    #[test]
    fn negative_similarities_still_merge() {
        let s = SimilarityMatrix::from_values(vec![
            vec![1.0, -0.5, -0.9],
            vec![-0.5, 1.0, -0.8],
            vec![-0.9, -0.8, 1.0],
        ])
        .unwrap();
        let m = merge_task_groups(&s, &Partition::singletons(3), 2).unwrap();
        assert_eq!(m.partition, part(&[&[0, 1], &[2]]));
        assert!(m.score < 0.0);
    }

    #[test]
    fn compute_tree_examples() {
        let s = blocks();
        let g = compute_tree(&s, &[1, 2, 3, 4], SearchMode::CountConstrained).unwrap();
        assert_eq!(g.tree.stages[3], Partition::singletons(4));
        assert_eq!(g.tree.stages[2], part(&[&[0, 1], &[2], &[3]]));
        assert_eq!(g.tree.stages[1], part(&[&[0, 1], &[2, 3]]));
        assert_eq!(g.tree.stages[0], Partition::single_group(4));
        let g = compute_tree(&s, &[4, 4], SearchMode::CountConstrained).unwrap();
        assert!(g.tree.stages.iter().all(Partition::is_all_singletons));
        assert!(compute_tree(&s, &[2, 1], SearchMode::CountConstrained).is_err());
    }

    #[test]
    fn unconstrained_search_caps_schedule() {
        let g = compute_tree(&blocks(), &[1, 2, 4], SearchMode::Unconstrained).unwrap();
        assert_eq!(g.schedule, vec![1, 2, 2]);
        assert_eq!(g.tree.stages[2], part(&[&[0, 1], &[2, 3]]));
    }

    #[test]
    fn swap_moves_tasks_across_groups() {
        let g = compute_tree(&blocks(), &[1, 2, 4], SearchMode::CountConstrained).unwrap();
        let swapped = swap_tasks(&g.tree, 1, 2, &[0, 1, 2]).unwrap();
        assert_eq!(swapped.stages[1], part(&[&[0, 2], &[1, 3]]));
        assert!(swap_tasks(&g.tree, 1, 2, &[1]).is_ok());
        assert!(swap_tasks(&g.tree, 0, 1, &[0, 1, 2]).is_err());
    }

    #[test]
    fn groups_file_round_trip() {
        let g = compute_tree(&blocks(), &[1, 2, 4], SearchMode::CountConstrained).unwrap();
        let f = GroupsFile::from_grouped(&g);
        let text = serde_json::to_string(&f).unwrap();
        assert!(text.starts_with(r#"{"schedule":[1,2,4],"stages":[[[0,1,2,3]],[[0,1],[2,3]]"#));
        let back = GroupsFile::from_json(&text).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.tree().unwrap(), g.tree);
    }
}
