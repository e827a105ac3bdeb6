use proptest::prelude::*;
use survclust::clustering::{fit, ClusterConfig};
use survclust::dataset::{Feature, FeatureSchema, Subject, SurvivalDataset};
use survclust::evaluation::{cox_hazard_ratio, evaluate, f_measure, render_table, survival_labels, EvalConfig};
use survclust::synth::{generate, matched_agreement, GroupSpec, SynthConfig};
use survclust::tree::TreeConfig;
use survclust::two_sample::logrank_test;

fn two_groups(rate0: f64, rate1: f64, n: usize, study_duration: f64, seed: u64) -> (Vec<(f64, bool, bool)>, Vec<usize>) {
    let config = SynthConfig {
        groups: vec![
            GroupSpec { weight: 0.5, hazard_rate: rate0, signature: vec![] },
            GroupSpec { weight: 0.5, hazard_rate: rate1, signature: vec![] },
        ],
        n_subjects: n,
        entry_window: 1.0,
        study_duration,
        noise_features: 0,
        seed,
    };
    let s = generate(&config).unwrap();
    let samples = s
        .dataset
        .subjects
        .iter()
        .zip(&s.truth)
        .map(|(x, &g)| (x.time, x.event, g == 1))
        .collect();
    (samples, s.truth)
}

#[test]
fn hazard_ratio_recovers_rate_ratio() {
    let (samples, _) = two_groups(1.0, 3.0, 10_000, f64::INFINITY, 17);
    let hr = cox_hazard_ratio(&samples).unwrap();
    assert!((2.8..=3.2).contains(&hr.hazard_ratio), "HR {}", hr.hazard_ratio);
    assert!(hr.ci95.0 < hr.hazard_ratio && hr.hazard_ratio < hr.ci95.1);
    assert!(!hr.diverged);
}

#[test]
fn hazard_ratio_invariances_with_censoring() {
    let (samples, _) = two_groups(1.0, 3.0, 4000, 2.0, 5);
    let base = cox_hazard_ratio(&samples).unwrap();

    let swapped: Vec<_> = samples.iter().map(|&(t, e, g)| (t, e, !g)).collect();
    let swapped = cox_hazard_ratio(&swapped).unwrap();
    assert!((swapped.beta + base.beta).abs() < 1e-9);
    assert!((swapped.hazard_ratio * base.hazard_ratio - 1.0).abs() < 1e-9);

    let scaled: Vec<_> = samples.iter().map(|&(t, e, g)| (t * 7.3, e, g)).collect();
    let scaled = cox_hazard_ratio(&scaled).unwrap();
    assert!((scaled.beta - base.beta).abs() < 1e-9);
}

#[test]
fn cox_and_logrank_agree_in_direction() {
    for (r0, r1, seed) in [(1.0, 2.0, 1), (2.0, 1.0, 2), (1.0, 1.3, 3), (1.2, 1.0, 4)] {
        let (samples, _) = two_groups(r0, r1, 1000, 3.0, seed);
        let beta = cox_hazard_ratio(&samples).unwrap().beta;
        let split = |g: bool| -> Vec<(f64, bool)> {
            samples.iter().filter(|s| s.2 == g).map(|&(t, e, _)| (t, e)).collect()
        };
        let lr = logrank_test(&[split(false), split(true)]).unwrap();
        let excess = lr.observed[1] - lr.expected[1];
        assert_eq!(excess > 0.0, beta > 0.0, "rates {r0}/{r1}: O-E {excess}, beta {beta}");
    }
}

#[test]
fn separated_groups_are_flagged() {
    let mut samples: Vec<(f64, bool, bool)> = (1..=20).map(|i| (i as f64, true, true)).collect();
    samples.extend((21..=40).map(|i| (i as f64, true, false)));
    let hr = cox_hazard_ratio(&samples).unwrap();
    assert!(hr.diverged);
}

fn dataset(rows: &[(f64, bool)]) -> SurvivalDataset {
    let schema = FeatureSchema::new(vec![Feature::numeric("x")]).unwrap();
    let subjects = rows
        .iter()
        .enumerate()
        .map(|(i, &(t, e))| Subject::new(format!("s{i}"), vec![survclust::dataset::FeatureValue::Numeric(0.0)], t, e))
        .collect();
    SurvivalDataset::new(schema, subjects)
}

proptest! {
    #[test]
    fn later_t1_never_adds_eligible_subjects(
        rows in prop::collection::vec((0.01f64..20.0, any::<bool>()), 1..60),
        t0 in 0.5f64..5.0,
        gap in 0.1f64..5.0,
        extra in 0.0f64..10.0,
    ) {
        let data = dataset(&rows);
        let near: Vec<usize> = survival_labels(&data, t0, t0 + gap).unwrap().iter().map(|l| l.index).collect();
        let far: Vec<usize> = survival_labels(&data, t0, t0 + gap + extra).unwrap().iter().map(|l| l.index).collect();
        prop_assert!(far.iter().all(|i| near.contains(i)));
    }
}

#[test]
fn classification_task_on_planted_groups() {
    // rates 2.0 vs 0.02: of those alive at t0 = 0.5, ~95% of the fast group
    // die before t1 = 2 and ~97% of the slow group survive it
    let config = SynthConfig::planted(&[(0.5, 2.0), (0.5, 0.02)], 4000, 5, 13);
    let s = generate(&config).unwrap();
    let cfg = ClusterConfig { k: Some(2), ..ClusterConfig::default() };
    let model = fit(&s.dataset, &TreeConfig::default(), &cfg).unwrap().model;
    let labels: Vec<usize> = s.dataset.subjects.iter().map(|x| model.cluster_assign(x).unwrap()).collect();
    assert!(matched_agreement(&labels, &s.truth) >= 0.9);

    let eval = EvalConfig { t0: 0.5, t1: 2.0, split: 0.7, seed: 1, threshold: 0.5 };
    let eligible = survival_labels(&s.dataset, eval.t0, eval.t1).unwrap();
    for g in 0..2 {
        let outcomes: Vec<bool> = eligible.iter().filter(|l| s.truth[l.index] == g).map(|l| l.alive_at_t1).collect();
        let alive = outcomes.iter().filter(|&&a| a).count() as f64 / outcomes.len() as f64;
        assert!(alive.max(1.0 - alive) >= 0.9, "group {g} purity {alive}");
    }
    let report = evaluate(&model, &s.dataset, &eval).unwrap();
    let row = &report.classification[0];
    assert!(row.metrics.accuracy >= 0.85, "accuracy {}", row.metrics.accuracy);
    let m = &row.metrics;
    assert!((m.f_measure - f_measure(m.precision, m.recall)).abs() < 1e-12);
    assert_eq!(m.tp + m.fp + m.tn + m.fn_, row.n_test);
    assert!(report.logrank.as_ref().unwrap().p < 1e-6);
    assert!(report.hazard_ratio.is_some());

    let json = serde_json::to_string(&report).unwrap();
    assert!(json.contains("\"chi2\""));
    assert!(render_table(&report).contains("Proposed Method (k = 2)"));
}

#[test]
fn single_cluster_report_notes_skips() {
    let config = SynthConfig::planted(&[(1.0, 1.0)], 500, 3, 2);
    let s = generate(&config).unwrap();
    let tree = TreeConfig { alpha: 1e-300, ..TreeConfig::default() };
    let model = fit(&s.dataset, &tree, &ClusterConfig::default()).unwrap().model;
    let report = evaluate(&model, &s.dataset, &EvalConfig { t0: 0.5, t1: 1.5, ..EvalConfig::default() }).unwrap();
    assert!(report.logrank.is_none());
    assert!(report.notes.iter().any(|n| n.contains("k<2")));
    assert_eq!(report.classification.len(), 1);
}
