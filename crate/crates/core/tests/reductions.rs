mod support;

use rand::Rng as _;

use tgmtl::autodiff::Graph;
use tgmtl::network::{BackboneWeights, BranchedNetwork, NetworkConfig, RankPolicy};
use tgmtl::params::ParamStore;
use tgmtl::rng::{normal_vec, rng_from};
use tgmtl::synthetic::TaskGenerator;
use tgmtl::tensor::Tensor;
use tgmtl::tglora::{ForwardCtx, LoraLinear, TgLoraLayer};
use tgmtl::trainer::{mode_layout, run_one, RunMode, TaskSpec, TrainConfig};
use tgmtl::tree::TaskTree;

#[test]
fn single_group_layer_is_plain_lora() {
    for seed in 0..50 {
        let mut r = support::rng(seed);
        let (d, k, n) = (r.random_range(1..=6), r.random_range(1..=6), r.random_range(1..=4));
        let rank = r.random_range(1..=d.min(k));
        let w = Tensor::new(vec![d, k], normal_vec(&mut r, d * k, 1.0)).unwrap();
        let b = Tensor::new(vec![d], normal_vec(&mut r, d, 1.0)).unwrap();
        let alpha = r.random_range(0.5..8.0);
        let mut store = ParamStore::new();
        let layer = TgLoraLayer::init(&mut store, "l", w.clone(), Some(b.clone()), &[rank], &[alpha], |_| {
            rng_from(seed, "a")
        })
        .unwrap();
        let bid = layer.modules[0].b;
        store.get_mut(bid).value = Tensor::new(vec![d, rank], normal_vec(&mut r, d * rank, 1.0)).unwrap();
        let x = Tensor::new(vec![n, k], normal_vec(&mut r, n * k, 1.0)).unwrap();
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let out = layer.forward(&mut g, &store, &[xn], &mut ForwardCtx::eval()).unwrap();
        let reference = LoraLinear {
            weight: w,
            bias: Some(b),
            a: store.value(layer.modules[0].a).clone(),
            b: store.value(bid).clone(),
            scaling: alpha / rank as f64,
        };
        assert_eq!(g.value(out[0]), &reference.forward(&x).unwrap(), "seed {seed}");
    }
}

#[test]
fn zero_adapters_are_the_backbone() {
    for seed in 0..30 {
        let mut r = support::rng(seed);
        let t = r.random_range(1..=4);
        let cfg = NetworkConfig {
            input_dim: 3,
            hidden_dim: 5,
            stage_count: r.random_range(1..=4),
            backbone_seed: seed,
            ..NetworkConfig::default()
        };
        let tree = support::random_tree(&mut r, cfg.stage_count, t);
        let names: Vec<String> = (0..t).map(|i| format!("t{i}")).collect();
        let net = BranchedNetwork::build(&cfg, &tree, RankPolicy::Uniform { rank: 2 }, &names, &vec![1; t], seed + 7).unwrap();
        let x = Tensor::new(vec![4, 3], normal_vec(&mut r, 12, 1.0)).unwrap();
        let frozen = BackboneWeights::generate(&cfg, seed).forward(&x).unwrap();
        for f in net.features(&x).unwrap() {
            assert_eq!(f, frozen, "seed {seed}");
        }
    }
}

#[test]
fn single_group_progressive_run_is_the_shared_run() {
    let cfg = NetworkConfig {
        input_dim: 6,
        hidden_dim: 8,
        stage_count: 3,
        head_hidden: 4,
        ..NetworkConfig::default()
    };
    let data = TaskGenerator::default().generate(&cfg, 48, 24, 5).unwrap();
    let specs = TaskSpec::for_dataset(&data);
    let train = TrainConfig {
        epochs: 3,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let tree = TaskTree::shared(3, 4);
    let policy = RankPolicy::Proportional {
        total_rank: 4,
        fixed_specific_rank: Some(2),
    };
    let run = |mode| {
        let (tree, policy) = mode_layout(&cfg, mode, &tree, policy, &[1; 4]).unwrap();
        run_one(mode, &cfg, &tree, policy, &data, &specs, &train, 11).unwrap()
    };
    let (pn, p) = run(RunMode::Progressive);
    let (sn, s) = run(RunMode::Shared);
    assert_eq!(p.epoch_losses, s.epoch_losses);
    assert_eq!(p.metric_values(), s.metric_values());
    assert_eq!(pn.store.hash_values(|_| true), sn.store.hash_values(|_| true));
}

#[test]
fn singleton_tree_matches_separate_networks() {
    let cfg = NetworkConfig {
        input_dim: 4,
        hidden_dim: 6,
        stage_count: 2,
        ..NetworkConfig::default()
    };
    let names: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
    let policy = RankPolicy::Uniform { rank: 2 };
    let mut net = BranchedNetwork::build(&cfg, &TaskTree::individual(2, 3), policy, &names, &[1, 2, 1], 3).unwrap();
    support::randomize_adapters(&mut net, &mut support::rng(1));
    let x = Tensor::new(vec![5, 4], normal_vec(&mut support::rng(2), 20, 1.0)).unwrap();
    let joint = net.predict(&x).unwrap();
    for (t, name) in names.iter().enumerate() {
        let outputs = [net.head_outputs[t]];
        let mut single =
            BranchedNetwork::build(&cfg, &TaskTree::shared(2, 1), policy, std::slice::from_ref(name), &outputs, 3).unwrap();
        for (id, p) in single.store.clone().iter() {
            let src = net.store.id(&p.name.replace(".g0.", &format!(".g{t}."))).unwrap();
            single.store.get_mut(id).value = net.store.value(src).clone();
        }
        assert_eq!(single.predict(&x).unwrap()[0], joint[t], "task {name}");
    }
}
