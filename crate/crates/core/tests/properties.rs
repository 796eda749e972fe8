mod common;

use common::{random_explicit, random_policy, random_tabular};
use offline_zsg::envgen::{collect_dataset, sample_contexts, uniform_behaviors, FamilyGenerator};
use offline_zsg::exact::{policy_value, TIE_TOL};
use offline_zsg::harness::{records, run_experiment, write_metrics_csv, ExperimentConfig, FamilySource, LearnerKind};
use offline_zsg::io::{
    read_datasets, read_env_spec, read_policy, write_datasets, write_env_spec, write_policy, EnvSpec, Provenance,
};
use offline_zsg::learners::{
    group_contexts, perm, perm_with_oracles, pppo, split_for_pppo, PolicyClass, PppoConfig,
};
use offline_zsg::model::{policy_distance, ContextDataset, MarkovPolicy};
use offline_zsg::ppe::{exact_oracles, generic_ppe, LinearPpe, LinearPpeConfig, StageOracle};
use proptest::prelude::*;

fn datasets(seed: u64, s: usize, a: usize, h: usize, n: usize, k: usize) -> Vec<ContextDataset> {
    let fam = sample_contexts(&FamilyGenerator::tabular(seed, s, a, h), n).unwrap();
    let behaviors = uniform_behaviors(&fam);
    fam.contexts()
        .iter()
        .zip(&behaviors)
        .enumerate()
        .map(|(i, (m, b))| collect_dataset(m, b, k, seed ^ 0x77, i).unwrap())
        .collect()
}

fn assert_rows_valid(p: &MarkovPolicy) {
    for h in 0..p.horizon() {
        for x in 0..p.num_states() {
            let row = p.row(h, x);
            assert!(row.iter().all(|v| v.is_finite() && *v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pessimistic_q_is_clipped_to_remaining_horizon(
        seed in 0u64..10_000, s in 1usize..4, a in 2usize..4, h in 1usize..4, k in 1usize..40,
        c in 0.01f64..2.0,
    ) {
        let m = random_tabular(seed, s, a, h);
        let data = collect_dataset(&m, &MarkovPolicy::uniform(h, s, a), k, seed, 0).unwrap();
        let cfg = LinearPpeConfig { beta_constant: c, ..Default::default() };
        let est = LinearPpe::new(&data.stage_datasets(), m.features(), &cfg).unwrap()
            .evaluate(&random_policy(seed, h, s, a)).unwrap();
        for (stage, e) in est.stages.iter().enumerate() {
            let ceiling = (h - stage) as f64;
            for q in &e.q {
                prop_assert!(*q >= 0.0 && *q <= ceiling);
            }
            for v in &e.v {
                prop_assert!(*v >= 0.0 && *v <= ceiling + 1e-12);
            }
            prop_assert!(e.gamma.iter().all(|g| *g >= 0.0));
        }
    }

    #[test]
    fn pppo_iterates_stay_on_the_simplex(
        seed in 0u64..10_000, n in 1usize..6, k in 3usize..30, alpha in prop::option::of(0.01f64..50.0),
    ) {
        let data = datasets(seed, 2, 3, 3, n, k);
        let feats = sample_contexts(&FamilyGenerator::tabular(seed, 2, 3, 3), 1).unwrap().first().features().clone();
        let cfg = PppoConfig { alpha, seed, delta: 0.1 };
        let out = pppo(&data, &cfg, &LinearPpeConfig::default(), &feats, 0).unwrap();
        prop_assert_eq!(out.iterates.len(), n);
        prop_assert!(out.selected < n);
        for p in &out.iterates {
            assert_rows_valid(p);
        }
        prop_assert_eq!(&out.policy, &out.iterates[out.selected]);
    }

    #[test]
    fn policy_distance_is_a_metric(seed in 0u64..10_000, h in 1usize..4, s in 1usize..4, a in 1usize..5) {
        let p = random_policy(seed, h, s, a);
        let q = random_policy(seed + 1, h, s, a);
        let r = random_policy(seed + 2, h, s, a);
        let pq = policy_distance(&p, &q).unwrap();
        prop_assert!(policy_distance(&p, &p).unwrap() == 0.0);
        prop_assert!((pq - policy_distance(&q, &p).unwrap()).abs() < 1e-15);
        prop_assert!(pq <= policy_distance(&p, &r).unwrap() + policy_distance(&r, &q).unwrap() + 1e-12);
    }

    #[test]
    fn perm_returns_first_maximizer_of_reported_values(seed in 0u64..10_000, n in 1usize..4, k in 1usize..20) {
        let data = datasets(seed, 2, 2, 2, n, k);
        let feats = data_features(seed);
        let class = PolicyClass::all_deterministic(2, 2, 2, 1 << 10).unwrap();
        let cfg = LinearPpeConfig { beta_constant: 0.05, ..Default::default() };
        let out = perm(&data, &class, 0.1, &cfg, &feats, 0, 1 << 20).unwrap();
        let best = out.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(out.values[out.index] >= best - TIE_TOL);
        for v in &out.values[..out.index] {
            prop_assert!(*v < best - TIE_TOL);
        }
        prop_assert_eq!(&out.policy, &class.members()[out.index]);
    }

    #[test]
    fn generic_loop_matches_linear_instantiation(
        seed in 0u64..10_000, k in 1usize..40, c in 0.01f64..2.0, lambda in 0.1f64..3.0,
    ) {
        let m = random_explicit(seed, 3, 2, 3, 2);
        let data = collect_dataset(&m, &MarkovPolicy::uniform(3, 3, 2), k, seed, 0).unwrap();
        let cfg = LinearPpeConfig { beta_constant: c, lambda, delta: 0.05 };
        let ppe = LinearPpe::new(&data.stage_datasets(), m.features(), &cfg).unwrap();
        let pi = random_policy(seed, 3, 3, 2);
        let linear = ppe.evaluate(&pi).unwrap();
        let oracles: Vec<&dyn StageOracle> = ppe.oracles().iter().map(|o| o as &dyn StageOracle).collect();
        let generic = generic_ppe(&oracles, &pi).unwrap();
        for (l, g) in linear.stages.iter().zip(&generic.stages) {
            prop_assert_eq!(&l.q, &g.q);
            prop_assert_eq!(&l.v, &g.v);
        }
    }

    #[test]
    fn exact_oracles_reproduce_true_values(seed in 0u64..10_000, s in 1usize..4, a in 1usize..4, h in 1usize..5) {
        let m = random_tabular(seed, s, a, h);
        let pi = random_policy(seed + 3, h, s, a);
        let oracles = exact_oracles(&m);
        let refs: Vec<&dyn StageOracle> = oracles.iter().map(|o| o as &dyn StageOracle).collect();
        let est = generic_ppe(&refs, &pi).unwrap();
        prop_assert!((est.initial_value(0) - policy_value(&m, &pi).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn env_spec_round_trips(seed in 0u64..10_000, n in 1usize..4, explicit in any::<bool>()) {
        let mut gen = FamilyGenerator::tabular(seed, 2, 2, 2);
        if explicit {
            gen.feature_kind = offline_zsg::model::FeatureKind::Explicit;
            gen.dim = 3;
        }
        let fam = sample_contexts(&gen, n).unwrap();
        let behaviors = uniform_behaviors(&fam);
        let spec = EnvSpec::from_family(&fam, Some(&behaviors));
        let back = read_env_spec(&write_env_spec(&spec).unwrap()).unwrap();
        prop_assert_eq!(&back, &spec);
        let fam2 = back.to_family().unwrap();
        for (x, y) in fam.contexts().iter().zip(fam2.contexts()) {
            for h in 0..2 {
                prop_assert_eq!(x.mu(h), y.mu(h));
                prop_assert_eq!(x.theta(h), y.theta(h));
            }
        }
    }

    #[test]
    fn datasets_round_trip(seed in 0u64..10_000, n in 1usize..4, k in 1usize..20) {
        let data = datasets(seed, 3, 2, 3, n, k);
        prop_assert_eq!(read_datasets(&write_datasets(&data)).unwrap(), data);
    }

    #[test]
    fn policies_round_trip(seed in 0u64..10_000, h in 1usize..4, s in 1usize..4, a in 1usize..4) {
        let pi = random_policy(seed, h, s, a);
        let prov = Provenance::new("pppo", seed, "abc").with("n", 4);
        let (back, p2) = read_policy(&write_policy(&pi, &prov)).unwrap();
        prop_assert_eq!(back, pi);
        prop_assert_eq!(p2, prov);
    }

    #[test]
    fn collection_is_deterministic_in_the_seed(seed in 0u64..10_000, k in 1usize..30) {
        let m = random_tabular(seed, 2, 3, 3);
        let b = random_policy(seed, 3, 2, 3);
        prop_assert_eq!(collect_dataset(&m, &b, k, seed, 1).unwrap(), collect_dataset(&m, &b, k, seed, 1).unwrap());
    }

    #[test]
    fn singleton_grouping_is_the_identity(seed in 0u64..10_000, n in 1usize..6, k in 1usize..10) {
        let data = datasets(seed, 2, 2, 2, n, k);
        let grouped = group_contexts(&data, n).unwrap();
        prop_assert_eq!(grouped.group_size, 1);
        prop_assert_eq!(grouped.groups, data);
    }
}

fn data_features(seed: u64) -> offline_zsg::model::FeatureMap {
    (**sample_contexts(&FamilyGenerator::tabular(seed, 2, 2, 2), 1).unwrap().first().features()).clone()
}

#[test]
fn pppo_split_uses_each_trajectory_at_most_once() {
    let (k, h) = (100, 7);
    let m = random_tabular(3, 4, 3, h);
    let data = collect_dataset(&m, &MarkovPolicy::uniform(h, 4, 3), k, 9, 0).unwrap();
    let stages = split_for_pppo(&data).unwrap();
    let mut used = std::collections::BTreeSet::new();
    for (stage, sd) in stages.iter().enumerate() {
        assert_eq!(sd.tuples.len(), k / h);
        for (tau, t) in sd.tuples.iter().enumerate() {
            let id = tau * h + stage;
            assert!(used.insert(id), "trajectory {id} reused");
            assert_eq!(*t, data.trajectories[id].steps[stage]);
        }
    }
    assert_eq!(used.len(), h * (k / h));
}

#[test]
fn perm_through_generic_oracles_matches_linear_perm() {
    let data = datasets(5, 2, 2, 2, 3, 15);
    let feats = data_features(5);
    let class = PolicyClass::all_deterministic(2, 2, 2, 1 << 10).unwrap();
    let base = LinearPpeConfig { beta_constant: 0.1, ..Default::default() };
    let linear = perm(&data, &class, 0.1, &base, &feats, 0, 1 << 20).unwrap();
    let cfg = base.with_delta(linear.delta);
    let evaluators: Vec<LinearPpe> =
        data.iter().map(|d| LinearPpe::new(&d.stage_datasets(), &feats, &cfg).unwrap()).collect();
    let per_ctx: Vec<Vec<&dyn StageOracle>> =
        evaluators.iter().map(|e| e.oracles().iter().map(|o| o as &dyn StageOracle).collect()).collect();
    let generic = perm_with_oracles(&per_ctx, &class, 0).unwrap();
    assert_eq!(generic.index, linear.index);
    for (a, b) in generic.values.iter().zip(&linear.values) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn harness_runs_are_reproducible() {
    let mut cfg = ExperimentConfig::new(
        FamilySource::Figure1 { epsilon: 0.1 },
        4,
        40,
        vec![LearnerKind::Perm, LearnerKind::Pppo, LearnerKind::Pevi],
    );
    cfg.repetitions = 3;
    cfg.seed = 11;
    let a = write_metrics_csv(&records(&run_experiment(&cfg).unwrap()));
    let b = write_metrics_csv(&records(&run_experiment(&cfg).unwrap()));
    assert_eq!(a, b);
}

#[test]
fn perm_budget_is_enforced() {
    let data = datasets(1, 2, 2, 2, 2, 5);
    let class = PolicyClass::all_deterministic(2, 2, 2, 1 << 10).unwrap();
    let err = perm(&data, &class, 0.1, &LinearPpeConfig::default(), &data_features(1), 0, 10).unwrap_err();
    assert!(matches!(err, offline_zsg::Error::Capacity { .. }));
}
