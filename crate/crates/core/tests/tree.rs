use std::collections::HashMap;

use rayon::ThreadPoolBuilder;
use survclust::dataset::{Feature, FeatureSchema, FeatureValue, Subject, SurvivalDataset};
use survclust::kaplan_meier::km_fit;
use survclust::synth::{generate, FeatureDist, GroupSpec, SynthConfig};
use survclust::tree::{
    best_split, enumerate_splits, grow_tree, NodeKind, Routing, SplitTest, SurvivalTree, TreeConfig, TreeNode,
};

fn group(weight: f64, rate: f64, signature: Vec<FeatureDist>) -> GroupSpec {
    GroupSpec {
        weight,
        hazard_rate: rate,
        signature,
    }
}

fn cat(probs: &[f64]) -> FeatureDist {
    FeatureDist::Categorical { probs: probs.to_vec() }
}

fn normal(mean: f64) -> FeatureDist {
    FeatureDist::Normal { mean, sd: 1.0 }
}

// group 0 is sig_0 = L0; groups 1 and 2 share sig_0 = L1 and differ on sig_1
fn two_feature_groups(seed: u64) -> SynthConfig {
    SynthConfig {
        groups: vec![
            group(0.4, 1.0, vec![cat(&[1.0, 0.0]), normal(0.0)]),
            group(0.3, 0.3, vec![cat(&[0.0, 1.0]), normal(0.0)]),
            group(0.3, 0.08, vec![cat(&[0.0, 1.0]), normal(6.0)]),
        ],
        n_subjects: 3000,
        entry_window: 5.0,
        study_duration: 15.0,
        noise_features: 5,
        seed,
    }
}

fn internal_features(tree: &SurvivalTree) -> Vec<usize> {
    tree.nodes
        .iter()
        .filter_map(|n| match n.kind {
            NodeKind::Internal { feature_index, .. } => Some(feature_index),
            NodeKind::Leaf { .. } => None,
        })
        .collect()
}

#[test]
fn recovers_both_planted_features() {
    let data = generate(&two_feature_groups(11)).unwrap().dataset;
    let tree = grow_tree(&data, &TreeConfig::default()).unwrap();
    assert!(tree.n_internal() >= 2);
    let used = internal_features(&tree);
    assert!(used.contains(&0) && used.contains(&1), "split features {used:?}");
    match tree.nodes[0].kind {
        NodeKind::Internal { feature_index, .. } => assert!(feature_index < 2),
        _ => panic!("root did not split"),
    }
}

#[test]
fn best_split_picks_planted_indicator() {
    let config = SynthConfig {
        groups: vec![
            group(0.5, 1.0, vec![cat(&[1.0, 0.0])]),
            group(0.5, 0.2, vec![cat(&[0.0, 1.0])]),
        ],
        n_subjects: 1000,
        entry_window: 1.0,
        study_duration: f64::INFINITY,
        noise_features: 10,
        seed: 3,
    };
    let data = generate(&config).unwrap().dataset;
    let cfg = TreeConfig::default();
    let candidates = enumerate_splits(&data.view(), &data.schema, &cfg);
    let split = best_split(&data.view(), &candidates, &cfg).expect("a significant split");
    assert_eq!(split.candidate.feature, 0);
    assert!(split.p_value < cfg.alpha / candidates.len() as f64);
    assert_eq!(split.n_candidates, candidates.len());

    assert!(best_split(&data.view(), &[], &cfg).is_none());
}

fn noise(seed: u64) -> SurvivalDataset {
    let config = SynthConfig {
        groups: vec![group(1.0, 1.0, vec![])],
        n_subjects: 200,
        entry_window: 1.0,
        study_duration: f64::INFINITY,
        noise_features: 20,
        seed,
    };
    generate(&config).unwrap().dataset
}

#[test]
fn bonferroni_gate_holds_on_noise() {
    let single = (0..100)
        .filter(|&seed| grow_tree(&noise(seed), &TreeConfig::default()).unwrap().n_leaves() == 1)
        .count();
    assert!(single >= 95, "{single}/100 single-leaf trees");
}

#[test]
fn tiny_alpha_gives_single_leaf() {
    let data = generate(&two_feature_groups(2)).unwrap().dataset;
    let cfg = TreeConfig {
        alpha: 1e-300,
        ..TreeConfig::default()
    };
    let tree = grow_tree(&data, &cfg).unwrap();
    assert_eq!(tree.n_leaves(), 1);
    assert_eq!(tree.nodes[0].n_subjects, data.len());
}

#[test]
fn depth_cap_one_allows_one_split() {
    let data = generate(&two_feature_groups(5)).unwrap().dataset;
    let cfg = TreeConfig {
        max_depth: 1,
        ..TreeConfig::default()
    };
    let tree = grow_tree(&data, &cfg).unwrap();
    assert!(tree.n_internal() <= 1);
    assert!(tree.depth() <= 1);
}

#[test]
fn partition_and_significance_properties() {
    for seed in [1, 2, 3] {
        let data = generate(&two_feature_groups(seed)).unwrap().dataset;
        let cfg = TreeConfig::default();
        let tree = grow_tree(&data, &cfg).unwrap();

        let mut counts = vec![(0usize, 0usize); tree.n_leaves()];
        for s in &data.subjects {
            let leaf = tree.assign_leaf(s).unwrap();
            counts[leaf].0 += 1;
            counts[leaf].1 += s.event as usize;
        }
        for (leaf, &(n, e)) in counts.iter().enumerate() {
            let node = tree.leaf(leaf);
            assert_eq!((node.n_subjects, node.n_events), (n, e));
            assert!(node.n_events >= cfg.min_leaf_events);
        }
        assert_eq!(counts.iter().map(|c| c.0).sum::<usize>(), data.len());

        for node in &tree.nodes {
            if let NodeKind::Internal {
                p_value,
                ln_p_value,
                n_candidates,
                corrected_alpha,
                ..
            } = node.kind
            {
                assert_eq!(corrected_alpha, cfg.alpha / n_candidates as f64);
                assert!(p_value < corrected_alpha);
                assert!(ln_p_value < corrected_alpha.ln());
            }
        }
    }
}

#[test]
fn deterministic_across_thread_counts() {
    let data = generate(&two_feature_groups(8)).unwrap().dataset;
    let grow = |threads| {
        ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| grow_tree(&data, &TreeConfig::default()).unwrap())
    };
    let one = serde_json::to_string(&grow(1)).unwrap();
    let four = serde_json::to_string(&grow(4)).unwrap();
    assert_eq!(one, four);
}

#[test]
fn json_round_trip_preserves_routing() {
    let data = generate(&two_feature_groups(4)).unwrap().dataset;
    let tree = grow_tree(&data, &TreeConfig::default()).unwrap();
    let json = serde_json::to_string(&tree).unwrap();
    let back: SurvivalTree = serde_json::from_str(&json).unwrap();
    assert_eq!(back, tree);
    assert_eq!(serde_json::to_string(&back).unwrap(), json);
    for s in &data.subjects {
        assert_eq!(back.assign_leaf(s).unwrap(), tree.assign_leaf(s).unwrap());
    }
}

#[test]
fn subject_order_does_not_matter() {
    let data = generate(&two_feature_groups(6)).unwrap().dataset;
    let mut reversed = data.clone();
    reversed.subjects.reverse();
    let a = grow_tree(&data, &TreeConfig::default()).unwrap();
    let b = grow_tree(&reversed, &TreeConfig::default()).unwrap();
    let leaf_of = |t: &SurvivalTree| -> HashMap<String, usize> {
        data.subjects
            .iter()
            .map(|s| (s.id.clone(), t.assign_leaf(s).unwrap()))
            .collect()
    };
    assert_eq!(leaf_of(&a), leaf_of(&b));
    assert_eq!(a.nodes.len(), b.nodes.len());
}

// Not a theorem (a larger minimum shrinks the Bonferroni family, which can
// admit a split that was rejected before), so checked on fixed seeds only.
#[test]
fn stronger_leaf_minimum_does_not_deepen_fixed_cases() {
    for seed in [1, 2, 3] {
        let data = generate(&two_feature_groups(seed)).unwrap().dataset;
        let depths: Vec<usize> = [10, 50, 100, 200, 400]
            .iter()
            .map(|&m| {
                let cfg = TreeConfig {
                    min_leaf_subjects: m,
                    ..TreeConfig::default()
                };
                grow_tree(&data, &cfg).unwrap().depth()
            })
            .collect();
        assert!(depths.windows(2).all(|w| w[1] <= w[0]), "seed {seed}: {depths:?}");
    }
}

fn stump(threshold: f64) -> SurvivalTree {
    let schema = FeatureSchema::new(vec![Feature::numeric("x")]).unwrap();
    let curve = km_fit(&[(1.0, true), (2.0, true)]).unwrap();
    let leaf = |id, leaf_id, n| TreeNode {
        id,
        depth: 1,
        n_subjects: n,
        n_events: 2,
        kind: NodeKind::Leaf {
            leaf_id,
            curve: curve.clone(),
        },
    };
    SurvivalTree {
        schema,
        config: TreeConfig::default(),
        nodes: vec![
            TreeNode {
                id: 0,
                depth: 0,
                n_subjects: 5,
                n_events: 4,
                kind: NodeKind::Internal {
                    feature: "x".into(),
                    feature_index: 0,
                    test: SplitTest::LessThan { threshold },
                    statistic: 1.0,
                    p_value: 0.0,
                    ln_p_value: -50.0,
                    n_candidates: 1,
                    corrected_alpha: 0.05,
                    left: 1,
                    right: 2,
                },
            },
            leaf(1, 0, 2),
            leaf(2, 1, 3),
        ],
        leaves: vec![1, 2],
    }
}

#[test]
fn boundary_value_goes_right() {
    let tree = stump(2.5);
    let at = |v: f64| tree.assign_leaf(&Subject::new("a", vec![FeatureValue::Numeric(v)], 1.0, true)).unwrap();
    assert_eq!(at(2.4999), 0);
    assert_eq!(at(2.5), 1);
    assert_eq!(at(9.0), 1);
}

#[test]
fn missing_values_need_majority_routing() {
    let tree = stump(2.5);
    assert!(tree.route(&[FeatureValue::Missing], Routing::Strict).is_err());
    // right child holds 3 of 5 training subjects
    assert_eq!(tree.route(&[FeatureValue::Missing], Routing::MajorityChild).unwrap(), 1);
    assert!(tree.route(&[], Routing::Strict).is_err());
}

#[test]
fn single_leaf_tree_routes_everything_home() {
    let data = noise(0);
    let cfg = TreeConfig {
        alpha: 1e-300,
        ..TreeConfig::default()
    };
    let tree = grow_tree(&data, &cfg).unwrap();
    assert!(data.subjects.iter().all(|s| tree.assign_leaf(s).unwrap() == 0));
}

#[test]
fn rejects_rootless_events() {
    let schema = FeatureSchema::new(vec![Feature::numeric("x")]).unwrap();
    let subjects = (0..10)
        .map(|i| Subject::new(format!("s{i}"), vec![FeatureValue::Numeric(i as f64)], 1.0, false))
        .collect();
    let data = SurvivalDataset::new(schema, subjects);
    assert!(matches!(
        grow_tree(&data, &TreeConfig::default()),
        Err(survclust::Error::NoEventsAtRoot)
    ));
}
