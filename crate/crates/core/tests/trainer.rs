mod common;

use std::collections::BTreeSet;

use latent_rag::index::VectorIndex;
use latent_rag::numerics::Tape;
use latent_rag::trainer::{
    check_turn_states, plan_rollout, rollout_loss_on, train, PositiveChoice, RolloutEnv, TrainConfig, TrainOutputs,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn zero_weights_reduce_to_next_token_loss() {
    let data = common::world(40, 20, 0, 4);
    let (model, head) = common::small_model(&data, 16, 1, 5);
    let index = VectorIndex::build(&data.corpus, &model).unwrap();
    let doc_tokens = RolloutEnv::tokenize_corpus(&model, &data.corpus);
    let env = RolloutEnv { model: &model, index: &index, corpus: &data.corpus, doc_tokens: &doc_tokens };
    let cfg = TrainConfig { lambda: 0.0, mu: 0.0, ..TrainConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for ex in &data.train {
        let plan = plan_rollout(&env, ex, &cfg, &mut rng).unwrap();
        let mut tape = Tape::<f64>::new();
        let parts = rollout_loss_on(&mut tape, &env, &head, &plan, &cfg).unwrap();
        assert!((tape.scalar(parts.total) - parts.ntp).abs() < 1e-12);
    }
}

#[test]
fn hop_order_positive_is_first_leftover_gold() {
    let data = common::world(40, 40, 0, 6);
    let (model, _) = common::small_model(&data, 16, 1, 7);
    let index = VectorIndex::build(&data.corpus, &model).unwrap();
    let doc_tokens = RolloutEnv::tokenize_corpus(&model, &data.corpus);
    let env = RolloutEnv { model: &model, index: &index, corpus: &data.corpus, doc_tokens: &doc_tokens };
    let cfg = TrainConfig { positive: PositiveChoice::HopOrder, ..TrainConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for ex in data.train.iter().filter(|e| e.hops == 2) {
        let plan = plan_rollout(&env, ex, &cfg, &mut rng).unwrap();
        let first = &plan.turns[0];
        assert_eq!(first.positive, index.position(&ex.gold_doc_ids[0]));
        assert!(first.negatives.iter().all(|n| !ex.gold_doc_ids.contains(&index.doc_ids()[*n])));
    }
}

#[test]
fn invariant_checker_rejects_broken_states() {
    let data = common::world(40, 10, 0, 8);
    let (model, _) = common::small_model(&data, 16, 1, 9);
    let index = VectorIndex::build(&data.corpus, &model).unwrap();
    let doc_tokens = RolloutEnv::tokenize_corpus(&model, &data.corpus);
    let env = RolloutEnv { model: &model, index: &index, corpus: &data.corpus, doc_tokens: &doc_tokens };
    let cfg = TrainConfig::default();
    let ex = &data.train[0];
    let plan = plan_rollout(&env, ex, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let positives: BTreeSet<String> = ex.gold_doc_ids.iter().cloned().collect();
    let mut states: Vec<_> = plan.turns.iter().map(|t| t.state.clone()).collect();
    check_turn_states(&states, &positives, cfg.k).unwrap();
    states[0].retrieved.insert("not-retrieved".into());
    assert!(check_turn_states(&states, &positives, cfg.k).is_err());
}

#[test]
fn training_is_deterministic_and_writes_metrics() {
    let data = common::world(40, 16, 0, 10);
    let cfg = TrainConfig { epochs: 1, batch_size: 4, refresh_period: 2, seed: 3, lr: 1e-3, ..TrainConfig::default() };
    let dir = tempfile::tempdir().unwrap();
    let run = |tag: &str| {
        let (mut model, mut head) = common::small_model(&data, 16, 1, 11);
        let mut index = VectorIndex::build(&data.corpus, &model).unwrap();
        let out = TrainOutputs { metrics_path: Some(dir.path().join(format!("{tag}.jsonl"))), checkpoint_path: None };
        let report = train(&mut model, &mut head, &mut index, &data.corpus, &data.train, &cfg, &out).unwrap();
        index.check_model(&model).unwrap();
        (report, latent_rag::checkpoint::encode_checkpoint(&model, &head))
    };
    let (a, bytes_a) = run("a");
    let (b, bytes_b) = run("b");
    assert_eq!(a.steps, 4);
    assert_eq!(bytes_a, bytes_b);
    assert_eq!(a.metrics, b.metrics);
    let lines = std::fs::read_to_string(dir.path().join("a.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), a.steps);
    assert!(a.refreshes >= 2);
}

#[test]
fn invalid_configs_are_refused() {
    for cfg in [
        TrainConfig { tau: 0.0, ..TrainConfig::default() },
        TrainConfig { k: 0, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { lambda: -1.0, ..TrainConfig::default() },
    ] {
        assert!(cfg.validate().is_err(), "{cfg:?}");
    }
    assert_eq!("uniform".parse::<PositiveChoice>().unwrap(), PositiveChoice::Uniform);
    assert!("first".parse::<PositiveChoice>().is_err());
}
