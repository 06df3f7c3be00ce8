mod support;

use proptest::prelude::*;

use tgmtl::cost::{compare_modes, CostMode};
use tgmtl::grouping::{best_partition, compute_tree, merge_task_groups, partition_score, single_merges, SearchMode};
use tgmtl::network::{NetworkConfig, RankPolicy};
use tgmtl::similarity::{pair_similarity, SimilarityMatrix};
use tgmtl::tree::{check_schedule, validate_tree, TaskTree};

fn permuted(sim: &SimilarityMatrix, perm: &[usize]) -> SimilarityMatrix {
    let t = sim.task_count();
    let mut v = vec![vec![0.0; t]; t];
    for i in 0..t {
        for j in 0..t {
            v[perm[i]][perm[j]] = sim.get(i, j);
        }
    }
    SimilarityMatrix::from_values(v).unwrap()
}

/// Non-decreasing counts ending anywhere in `1..=t`.
fn random_schedule(seed: u64, stages: usize, t: usize) -> Vec<usize> {
    use rand::Rng as _;
    let mut r = support::rng(seed);
    let mut v: Vec<usize> = (0..stages).map(|_| r.random_range(1..=t)).collect();
    v.sort_unstable();
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn score_matches_oracle(seed in any::<u64>(), t in 1usize..7) {
        let mut r = support::rng(seed);
        let sim = support::random_similarity(&mut r, t);
        let p = support::random_partition(&mut r, t, t);
        let s = partition_score(&sim, &p).unwrap();
        prop_assert!((s.total - support::oracle_score(&sim, p.groups())).abs() < 1e-12);
        prop_assert!((s.task_scores.iter().sum::<f64>() - s.total).abs() < 1e-12);
        prop_assert_eq!(partition_score(&sim, &p).unwrap().total.to_bits(), s.total.to_bits());
    }

    #[test]
    fn search_is_permutation_equivariant(seed in any::<u64>(), t in 2usize..7) {
        let mut r = support::rng(seed);
        let sim = support::random_similarity(&mut r, t);
        let perm = support::permutation(&mut r, t);
        let psim = permuted(&sim, &perm);
        for m in 1..=t {
            let a = best_partition(&sim, m, SearchMode::CountConstrained).unwrap();
            let b = best_partition(&psim, m, SearchMode::CountConstrained).unwrap();
            prop_assert!((a.score - b.score).abs() < 1e-9);
            if a.tie_breaks == 0 && b.tie_breaks == 0 {
                prop_assert_eq!(a.partition.relabeled(&perm).canonical(), b.partition);
            }
        }
    }

    #[test]
    fn best_partition_dominates_every_partition(seed in any::<u64>(), t in 1usize..7) {
        let mut r = support::rng(seed);
        let sim = support::random_similarity(&mut r, t);
        let free = best_partition(&sim, 0, SearchMode::Unconstrained).unwrap();
        for groups in support::all_partitions(t) {
            let s = support::oracle_score(&sim, &groups);
            prop_assert!(s <= free.score + 1e-12);
            let m = best_partition(&sim, groups.len(), SearchMode::CountConstrained).unwrap();
            prop_assert!(s <= m.score + 1e-12);
        }
    }

    #[test]
    fn greedy_merge_takes_best_single_merge(seed in any::<u64>(), t in 2usize..7) {
        let mut r = support::rng(seed);
        let sim = support::random_similarity(&mut r, t);
        let p = support::random_partition(&mut r, t, t);
        prop_assume!(p.len() > 1);
        let chosen = merge_task_groups(&sim, &p, p.len() - 1).unwrap();
        let best = single_merges(&sim, &p).unwrap().into_iter().map(|(_, s)| s).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!((chosen.score - best).abs() < 1e-12);
    }

    #[test]
    fn computed_trees_are_valid(seed in any::<u64>(), t in 1usize..7, stages in 1usize..5) {
        let mut r = support::rng(seed);
        let sim = support::random_similarity(&mut r, t);
        let counts = random_schedule(seed, stages, t);
        prop_assert!(check_schedule(&counts, t).is_ok());
        for mode in [SearchMode::CountConstrained, SearchMode::Unconstrained] {
            let g = compute_tree(&sim, &counts, mode).unwrap();
            prop_assert!(validate_tree(&g.tree, t).is_empty());
            if mode == SearchMode::CountConstrained {
                prop_assert_eq!(g.tree.group_counts(), counts.clone());
            }
        }
    }

    #[test]
    fn broken_trees_are_rejected(seed in any::<u64>(), t in 2usize..7, stages in 2usize..5) {
        use rand::Rng as _;
        let mut r = support::rng(seed);
        let tree = support::random_tree(&mut r, stages, t);
        prop_assert!(validate_tree(&tree, t).is_empty());
        let mut groups: Vec<Vec<Vec<usize>>> = tree.stages.iter().map(|p| p.groups().to_vec()).collect();
        let s = r.random_range(0..stages);
        match r.random_range(0..3) {
            // drop a task
            0 => {
                let g = r.random_range(0..groups[s].len());
                groups[s][g].pop();
            }
            // duplicate a task
            1 => {
                let g = r.random_range(0..groups[s].len());
                let extra = (groups[s][g][0] + 1) % t;
                groups[s][g].push(extra);
            }
            // split a later group across two earlier ones
            _ => {
                let last = stages - 1;
                groups[0] = vec![(0..t).collect()];
                groups[last] = vec![(0..t).collect()];
                groups[last - 1] = (0..t).map(|i| vec![i]).collect();
            }
        }
        let broken = TaskTree::new(
            groups.into_iter().map(|g| serde_json::from_value(serde_json::json!(g)).unwrap()).collect(),
        );
        prop_assert!(!validate_tree(&broken, t).is_empty(), "{:?}", broken);
    }

    #[test]
    fn cost_lies_between_extremes(seed in any::<u64>()) {
        use rand::Rng as _;
        let mut r = support::rng(seed);
        let t = r.random_range(2..=6);
        let stages = r.random_range(1..=5);
        let cfg = NetworkConfig {
            input_dim: r.random_range(1..=32),
            hidden_dim: r.random_range(4..=64),
            stage_count: stages,
            head_hidden: r.random_range(1..=16),
            ..NetworkConfig::default()
        };
        let tree = support::random_tree(&mut r, stages, t);
        let outputs: Vec<usize> = (0..t).map(|_| r.random_range(1..=4)).collect();
        let rank = r.random_range(1..=4);
        let reports = compare_modes(&cfg, &tree, RankPolicy::Uniform { rank }, &outputs).unwrap();
        let get = |m: CostMode| reports.iter().find(|x| x.mode == m).unwrap();
        let (i, s, p) = (get(CostMode::Individual), get(CostMode::Shared), get(CostMode::Progressive));
        prop_assert!(reports.iter().all(|x| x.is_consistent()));
        prop_assert!(s.macs <= p.macs && p.macs <= i.macs);
        prop_assert!(s.trainable_params <= p.trainable_params && p.trainable_params <= i.trainable_params);
        if tree.group_counts().iter().any(|&c| 1 < c && c < t) {
            prop_assert!(s.macs < p.macs && p.macs < i.macs);
            prop_assert!(s.trainable_params < p.trainable_params && p.trainable_params < i.trainable_params);
        }
    }

    #[test]
    fn pair_similarity_is_cosine(a in prop::collection::vec(-10.0f64..10.0, 1..20), seed in any::<u64>()) {
        let b: Vec<f64> = tgmtl::rng::normal_vec(&mut support::rng(seed), a.len(), 3.0);
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assume!(na > 1e-6 && nb > 1e-6);
        let s = pair_similarity(&a, &b).unwrap();
        prop_assert!((s - dot / (na * nb)).abs() < 1e-12);
        let scaled: Vec<f64> = a.iter().map(|x| x * 7.5).collect();
        prop_assert!((pair_similarity(&scaled, &b).unwrap() - s).abs() < 1e-12);
    }
}

#[test]
fn zero_gradient_has_zero_similarity() {
    assert_eq!(pair_similarity(&[0.0, 0.0], &[1.0, 2.0]).unwrap(), 0.0);
}
