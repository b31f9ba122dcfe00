use std::collections::BTreeSet;

use dsal_core::active::{
    init_state, oracle_annotate, run_policy, run_round, score_pool, select, start_session, ActiveError, Environment,
    PolicyKind, Protocol, QueryPolicy, RoundMetrics, SimulatedPool, TrainConfig,
};
use dsal_core::data::{make_dataset, DatasetConfig, Sample};
use dsal_core::metrics::ScoreRecord;
use dsal_core::segnet::{build_model, ModelConfig};
use dsal_core::tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_env() -> Environment {
    let d = make_dataset(&DatasetConfig {
        resolution: (16, 16),
        n_train: 30,
        n_val: 4,
        n_test: 6,
        seed: 8,
        ..DatasetConfig::default()
    })
    .unwrap();
    Environment {
        pool: SimulatedPool::new(d.train).unwrap(),
        val: d.val,
        test: d.test,
    }
}

fn small_protocol(budget: usize) -> Protocol {
    Protocol {
        model: ModelConfig {
            depth: 2,
            base_channels: 2,
            input_size: (16, 16),
            ..ModelConfig::default()
        },
        train: TrainConfig {
            epochs_per_round: 2,
            batch_size: 4,
            ..TrainConfig::default()
        },
        n_init: 4,
        label_budget: budget,
    }
}

fn history(env: &Environment, protocol: &Protocol, kind: PolicyKind, seed: u64) -> Vec<RoundMetrics> {
    let mut rows = Vec::new();
    let policy = QueryPolicy { kind, k: 5 };
    let state = run_policy(env, protocol, &policy, seed, |m, _| {
        rows.push(m.clone());
        Ok(())
    })
    .unwrap();
    assert_eq!(state.history, rows);
    assert!(state.labeled.is_disjoint(&state.unlabeled));
    assert_eq!(state.pool_size(), env.pool.len());
    rows
}

#[test]
fn rounds_follow_the_label_schedule() {
    let env = small_env();
    let rows = history(&env, &small_protocol(16), PolicyKind::ConsistencyHigh, 1);
    let labels: Vec<usize> = rows.iter().map(|r| r.labels_used).collect();
    // 4 initial labels, batches of 5, capped at the budget of 16
    assert_eq!(labels, [4, 9, 14, 16]);
    assert_eq!(rows.iter().map(|r| r.round).collect::<Vec<_>>(), [0, 1, 2, 3]);
    for r in &rows {
        assert_eq!(r.scores.len(), 30 - r.labels_used);
        assert!(r.scores.windows(2).all(|w| w[0].sample_id < w[1].sample_id));
        assert!(r.scores.iter().all(|s| (0.0..=1.0).contains(&s.mean_score) && s.r_dsc.is_some()));
    }
    assert!(rows.last().unwrap().queried.is_empty());
}

#[test]
fn budget_equal_to_pool_ends_on_the_full_pool() {
    let env = small_env();
    let rows = history(&env, &small_protocol(30), PolicyKind::Random, 2);
    let last = rows.last().unwrap();
    assert_eq!(last.labels_used, 30);
    assert!(last.scores.is_empty());
}

#[test]
fn runs_are_deterministic_and_policies_share_round_zero() {
    let env = small_env();
    let p = small_protocol(14);
    let high = history(&env, &p, PolicyKind::ConsistencyHigh, 3);
    assert_eq!(high, history(&env, &p, PolicyKind::ConsistencyHigh, 3));
    let random = history(&env, &p, PolicyKind::Random, 3);
    assert_eq!(high[0].test_dsc.to_bits(), random[0].test_dsc.to_bits());
    assert_eq!(high[0].scores, random[0].scores);
    assert_ne!(high[0].queried, random[0].queried);
}

#[test]
fn divergence_aborts_the_round_without_committing() {
    let env = small_env();
    let p = small_protocol(14);
    let session = start_session(&env, &p, 0).unwrap();
    let poisoned = session.labeled[0].id.clone();
    let mut bad = session.clone();
    bad.labeled[0].image = Tensor::full(&[1, 16, 16], f32::NAN);
    let err = run_round(&bad, &env, &p, &QueryPolicy::default()).unwrap_err();
    assert!(err.is_divergence(), "{err}");
    assert_eq!(bad.state.round, 0);
    assert!(bad.state.history.is_empty());
    assert!(bad.state.labeled.contains(&poisoned));
    // the pool image is untouched, so the clean session still trains
    assert!(run_round(&session, &env, &p, &QueryPolicy::default()).is_ok());
}

#[test]
fn annotation_validates_before_moving_anything() {
    let env = small_env();
    let ids = env.pool.ids();
    let mut state = init_state(&ids, 4, 0).unwrap();
    let before = state.clone();
    let labeled = state.labeled.iter().next().unwrap().clone();
    let unlabeled: Vec<String> = state.unlabeled.iter().take(2).cloned().collect();

    assert!(oracle_annotate(&mut state, &[unlabeled[0].clone(), labeled], &env.pool).is_err());
    assert!(oracle_annotate(&mut state, &["nope".into()], &env.pool).is_err());
    assert!(oracle_annotate(&mut state, &[unlabeled[0].clone(), unlabeled[0].clone()], &env.pool).is_err());
    assert_eq!(state, before);

    assert!(oracle_annotate(&mut state, &[], &env.pool).unwrap().is_empty());
    assert_eq!(state, before);

    let got = oracle_annotate(&mut state, &unlabeled, &env.pool).unwrap();
    assert_eq!(state.labeled.len(), 6);
    assert!(got.iter().all(|s| s.labeled && s.mask.is_some()));
    assert!(state.labeled.is_disjoint(&state.unlabeled));
}

#[test]
fn pool_without_ground_truth_is_rejected() {
    let image = Tensor::zeros(&[1, 4, 4]);
    let s = Sample::new("a", image, None).unwrap();
    assert!(matches!(SimulatedPool::new(vec![s]), Err(ActiveError::Invalid(_))));
}

#[test]
fn scoring_is_pure_and_complete() {
    let env = small_env();
    let model = build_model::<f32>(&small_protocol(10).model).unwrap();
    let ids = env.pool.ids();
    let pool: Vec<&Sample> = ids.iter().rev().map(|id| env.pool.image(id).unwrap()).collect();
    let a = score_pool(&model, &pool, Some(env.pool.truth()), 1).unwrap();
    assert_eq!(a, score_pool(&model, &pool, Some(env.pool.truth()), 1).unwrap());
    assert_eq!(a.len(), 30);
    assert_eq!(a.iter().map(|r| &r.sample_id).collect::<BTreeSet<_>>().len(), 30);
    assert!(score_pool(&model, &[], None, 0).unwrap().is_empty());
    let blind = score_pool(&model, &pool[..3], None, 0).unwrap();
    assert!(blind.iter().all(|r| r.r_dsc.is_none()));
}

fn records(scores: &[f64]) -> Vec<ScoreRecord> {
    scores
        .iter()
        .enumerate()
        .map(|(i, &s)| ScoreRecord {
            sample_id: format!("id{i:03}"),
            l_dsc: s,
            m_dsc: s,
            mean_score: s,
            r_dsc: None,
            round: 0,
        })
        .collect()
}

proptest! {
    #[test]
    fn high_policy_takes_a_top_set(
        scores in prop::collection::vec(prop::sample::select(vec![0.0, 0.25, 0.5, 0.6, 0.9, 1.0]), 1..40),
        k in 1usize..12,
    ) {
        let recs = records(&scores);
        let policy = QueryPolicy { kind: PolicyKind::ConsistencyHigh, k };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let picked = select(&recs, &policy, &mut rng);
        prop_assert_eq!(picked.len(), k.min(recs.len()));
        let chosen: BTreeSet<&String> = picked.iter().collect();
        let min_in = recs.iter().filter(|r| chosen.contains(&r.sample_id)).map(|r| r.mean_score).fold(f64::INFINITY, f64::min);
        let max_out = recs.iter().filter(|r| !chosen.contains(&r.sample_id)).map(|r| r.mean_score).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(min_in >= max_out);
        // among tied boundary scores the smaller ids win
        for r in recs.iter().filter(|r| !chosen.contains(&r.sample_id) && r.mean_score == min_in) {
            prop_assert!(picked.iter().filter(|id| recs.iter().any(|x| &x.sample_id == *id && x.mean_score == min_in)).all(|id| id < &r.sample_id));
        }

        let squashed: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() / 40.0).collect();
        let again = select(&records(&squashed), &policy, &mut rng);
        prop_assert_eq!(again, picked);
    }
}
