//! Acceptance harness. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! Criteria 5-8 read the trained artifacts from `artifacts/` at the workspace
//! root (override with `LATENT_RAG_ARTIFACTS`); see the README for the
//! command that produces them. Their FAIL lines are printed but only fail
//! the run when `ACCEPTANCE_STRICT` is set; criteria 1-4 and 9 always do.

mod common;

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::time::Instant;

use latent_rag::checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint};
use latent_rag::control::ControlHead;
use latent_rag::datakit::{evaluate, generate_synthetic, EvalMode, EvalReport, SyntheticConfig};
use latent_rag::entropy_lab::entropy_experiment;
use latent_rag::index::VectorIndex;
use latent_rag::model::MicroTransformer;
use latent_rag::numerics::{ParamId, ParamStore, Tape};
use latent_rag::trainer::{
    check_turn_states, contrastive_loss, plan_rollout, rollout_loss_on, train, RolloutEnv, TrainConfig, TrainOutputs,
};
use latent_rag::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

const GRADCHECK_WARM_STEPS: usize = 30;

fn main() {
    let strict = std::env::var_os("ACCEPTANCE_STRICT").is_some();
    let criteria: Vec<(&str, bool, fn() -> Outcome)> = vec![
        ("1 full-objective gradient check", true, gradient_check),
        ("2 top-K oracle equivalence", true, top_k_oracle),
        ("3 contrastive identities", true, contrastive_identities),
        ("4 rollout invariants", true, rollout_invariants),
        ("5 retrieval learning", strict, retrieval_learning),
        ("6 entropy ordering", strict, entropy_ordering),
        ("7 adaptive control", strict, adaptive_control),
        ("8 end-to-end EM ordering", strict, em_ordering),
        ("9 persistence round trips", true, persistence),
    ];
    let (mut failed, mut fatal) = (0, 0);
    for (name, gating, f) in criteria {
        let started = Instant::now();
        let outcome = f();
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("PASS  {name}: {msg} ({secs:.1}s)"),
            Err(msg) => {
                failed += 1;
                fatal += usize::from(gating);
                println!("FAIL  {name}: {msg} ({secs:.1}s)");
            }
        }
    }
    println!("{} of 9 criteria passed", 9 - failed);
    if fatal > 0 {
        std::process::exit(1);
    }
}

fn check(ok: bool, msg: String) -> Outcome {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn gradient_check() -> Outcome {
    let started = Instant::now();
    let data = common::world(40, 24, 4, 5);
    let vocab = common::vocab_for(&data);
    let cfg = common::small_config(&vocab, 8, 1, 2);
    let mut model = MicroTransformer::new(cfg, vocab, 3).map_err(|e| e.to_string())?;
    let mut head = ControlHead::new(8, 8, 4);
    let tc = TrainConfig {
        n_neg: 3,
        neg_pool: 3,
        ..TrainConfig::default()
    };
    // At initialisation every [PRED] state is nearly the same vector, so the
    // cosine terms are extremely curved and eps=1e-3 differences are
    // dominated by truncation error. A few optimizer steps move the check to
    // a representative point.
    let mut index = VectorIndex::build(&data.corpus, &model).map_err(|e| e.to_string())?;
    let warm = TrainConfig {
        lr: 1e-2,
        batch_size: 4,
        max_steps: Some(GRADCHECK_WARM_STEPS),
        epochs: 100,
        ..tc.clone()
    };
    train(&mut model, &mut head, &mut index, &data.corpus, &data.train, &warm, &TrainOutputs::default())
        .map_err(|e| e.to_string())?;
    let (model, head) = (model, head);
    let doc_tokens = RolloutEnv::tokenize_corpus(&model, &data.corpus);
    let ex = data.train.iter().find(|e| e.hops == 2).expect("a 2-hop example");
    let env = RolloutEnv {
        model: &model,
        index: &index,
        corpus: &data.corpus,
        doc_tokens: &doc_tokens,
    };
    let plan = plan_rollout(&env, ex, &tc, &mut ChaCha8Rng::seed_from_u64(9)).map_err(|e| e.to_string())?;

    let loss_at = |model: &MicroTransformer, head: &ControlHead| -> f64 {
        let env = RolloutEnv {
            model,
            index: &index,
            corpus: &data.corpus,
            doc_tokens: &doc_tokens,
        };
        let mut tape = Tape::<f64>::new();
        let parts = rollout_loss_on(&mut tape, &env, head, &plan, &tc).expect("loss");
        tape.scalar(parts.total)
    };
    let mut tape = Tape::<f64>::new();
    let parts = rollout_loss_on(&mut tape, &env, &head, &plan, &tc).map_err(|e| e.to_string())?;
    let grads = tape.backward(parts.total).map_err(|e| e.to_string())?;
    if parts.cl.is_empty() {
        return Err("plan has no contrastive term".into());
    }

    // Coordinates drawn across every parameter tensor of both stores.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut coords: Vec<(bool, usize, usize)> = Vec::new();
    let pick = |store: &ParamStore, is_head: bool, per: usize, rng: &mut ChaCha8Rng, out: &mut Vec<(bool, usize, usize)>| {
        for (i, p) in store.iter().enumerate() {
            for _ in 0..per.min(p.value.len()) {
                out.push((is_head, i, rng.gen_range(0..p.value.len())));
            }
        }
    };
    pick(model.params(), false, 8, &mut rng, &mut coords);
    pick(head.params(), true, 4, &mut rng, &mut coords);
    let eps = 1e-3f32;
    let (mut worst, mut checked) = (0.0f64, 0usize);
    for &(is_head, i, j) in &coords {
        let store = if is_head { head.params() } else { model.params() };
        let analytic = grads.get(store.key(ParamId(i))).map_or(0.0, |g| g[j]);
        let base = store.get(ParamId(i)).value.data()[j];
        let eval_with = |v: f32| -> f64 {
            let mut m = model.clone();
            let mut h = ControlHead::from_params(head.params().clone()).expect("head");
            let s = if is_head { h.params_mut() } else { m.params_mut() };
            s.get_mut(ParamId(i)).value.data_mut()[j] = v;
            loss_at(&m, &h)
        };
        let plus = eval_with(base + eps);
        let minus = eval_with(base - eps);
        let h = ((base + eps) as f64) - ((base - eps) as f64);
        let numeric = (plus - minus) / h;
        let denom = analytic.abs().max(numeric.abs()).max(1e-4);
        worst = worst.max((analytic - numeric).abs() / denom);
        checked += 1;
    }
    let secs = started.elapsed().as_secs_f64();
    check(
        checked >= 100 && worst <= 1e-3 && secs <= 60.0,
        format!("{checked} coordinates, worst relative error {worst:.2e}, {secs:.1}s"),
    )
}

fn top_k_oracle() -> Outcome {
    let started = Instant::now();
    let (n, d, k) = (1000usize, 64usize, 10usize);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let ids: Vec<String> = (0..n).map(|i| format!("v{i:04}")).collect();
    let vectors: Vec<f32> = (0..n * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let index = VectorIndex::from_parts(d, ids.clone(), vectors.clone(), 0).map_err(|e| e.to_string())?;
    for trial in 0..100 {
        let q: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let mut scored: Vec<(f64, &str)> = vectors
            .chunks_exact(d)
            .zip(&ids)
            .map(|(v, id)| (oracle_cosine(&q, v), id.as_str()))
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite").then(a.1.cmp(b.1)));
        let want: Vec<&str> = scored[..k].iter().map(|s| s.1).collect();
        let got = index.top_k(&q, k).map_err(|e| e.to_string())?;
        if got.ids() != want {
            return Err(format!("trial {trial}: {:?} != {want:?}", got.ids()));
        }
    }
    let secs = started.elapsed().as_secs_f64();
    check(secs <= 30.0, format!("100 trials identical to a full sort, {secs:.2}s"))
}

fn oracle_cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn contrastive_identities() -> Outcome {
    let q = [0.3f32, -0.2, 0.9, 0.1];
    let same = [0.6f32, 0.4, -0.1, 0.5];
    let mut worst = 0.0f64;
    for n in [1usize, 5, 15] {
        let negs: Vec<&[f32]> = vec![&same; n];
        let loss = contrastive_loss(&q, &same, &negs, 0.05).map_err(|e| e.to_string())?;
        worst = worst.max((loss - ((n + 1) as f64).ln()).abs());
    }
    if worst > 1e-6 {
        return Err(format!("uniform case off by {worst:.2e}"));
    }
    let q = [1.0f32, 0.0];
    let negs = [[0.2f32, 0.98], [-0.5, 0.86], [0.0, 1.0]];
    let negs: Vec<&[f32]> = negs.iter().map(|v| v.as_slice()).collect();
    let mut prev = f64::INFINITY;
    for i in 0..100 {
        let theta = std::f64::consts::PI * (1.0 - i as f64 / 99.0);
        let pos = [theta.cos() as f32, theta.sin() as f32];
        let loss = contrastive_loss(&q, &pos, &negs, 0.1).map_err(|e| e.to_string())?;
        if loss >= prev {
            return Err(format!("sweep point {i}: {loss} not below {prev}"));
        }
        prev = loss;
    }
    Ok(format!("|loss - ln(N+1)| <= {worst:.1e} for N in 1,5,15; 100-point sweep strictly decreasing"))
}

fn rollout_invariants() -> Outcome {
    let data = common::world(60, 100, 0, 8);
    let vocab = common::vocab_for(&data);
    let cfg = common::small_config(&vocab, 16, 1, 2);
    let mut n = 0usize;
    for seed in 0..10u64 {
        let model = MicroTransformer::new(cfg.clone(), vocab.clone(), seed).map_err(|e| e.to_string())?;
        let doc_tokens = RolloutEnv::tokenize_corpus(&model, &data.corpus);
        let index = VectorIndex::build(&data.corpus, &model).map_err(|e| e.to_string())?;
        let env = RolloutEnv {
            model: &model,
            index: &index,
            corpus: &data.corpus,
            doc_tokens: &doc_tokens,
        };
        let tc = TrainConfig {
            k: 1 + seed as usize % 3,
            max_turns: 3,
            seed,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for ex in &data.train {
            let plan = plan_rollout(&env, ex, &tc, &mut rng).map_err(|e| e.to_string())?;
            let states: Vec<_> = plan.turns.iter().map(|t| t.state.clone()).collect();
            let positives: BTreeSet<String> = ex.gold_doc_ids.iter().cloned().collect();
            check_turn_states(&states, &positives, tc.k).map_err(|e| e.to_string())?;
            for w in states.windows(2) {
                if w[1].label < w[0].label || !w[1].leftover.is_subset(&w[0].leftover) {
                    return Err(format!("invariant broken on `{}`", ex.question));
                }
            }
            if states.iter().any(|s| s.retrieved.len() > s.turn * tc.k) {
                return Err(format!("|R| bound broken on `{}`", ex.question));
            }
            n += 1;
        }
    }
    check(n >= 1000, format!("{n} rollouts, all invariants hold"))
}

struct Trained {
    model: MicroTransformer,
    head: ControlHead,
    data: latent_rag::datakit::SyntheticData,
    train_secs: f64,
    reports: Vec<EvalReport>,
}

fn artifacts_dir() -> PathBuf {
    std::env::var_os("LATENT_RAG_ARTIFACTS")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../artifacts"))
}

fn trained() -> Result<&'static Trained, String> {
    static CELL: std::sync::OnceLock<Result<Trained, String>> = std::sync::OnceLock::new();
    CELL.get_or_init(|| {
        let dir = artifacts_dir();
        let ckpt = dir.join("model.ckpt");
        let (model, head) =
            load_checkpoint(&ckpt).map_err(|e| format!("{e}; train the artifacts as described in the README"))?;
        let index = VectorIndex::load_for_model(dir.join("index.lidx"), &model).map_err(|e| e.to_string())?;
        index.check_model(&model).map_err(|e| e.to_string())?;
        let report: serde_json::Value = std::fs::read_to_string(dir.join("train_report.json"))
            .ok()
            .and_then(|s| serde_json::from_str(&s).ok())
            .ok_or("missing or unreadable train_report.json")?;
        let train_secs = report["elapsed_secs"].as_f64().ok_or("train_report.json lacks elapsed_secs")?;
        let data = generate_synthetic(&SyntheticConfig::default()).map_err(|e| e.to_string())?;
        let mut reports = Vec::new();
        for mode in EvalMode::ALL {
            let (r, _) = evaluate(&model, &head, &index, &data.corpus, &data.eval, 3, 3, mode).map_err(|e| e.to_string())?;
            reports.push(r);
        }
        Ok(Trained {
            model,
            head,

            data,
            train_secs,
            reports,
        })
    })
    .as_ref()
    .map_err(Clone::clone)
}

fn report(t: &Trained, mode: EvalMode) -> &EvalReport {
    t.reports.iter().find(|r| r.mode == mode).expect("every mode evaluated")
}

fn retrieval_learning() -> Outcome {
    let t = trained()?;
    let r = report(t, EvalMode::AlwaysMax);
    let fresh = MicroTransformer::new(t.model.config().clone(), t.model.vocab().clone(), 12345).map_err(|e| e.to_string())?;
    let fresh_head = ControlHead::new(fresh.dim(), t.head.hidden_dim(), 12346);
    let fresh_index = VectorIndex::build(&t.data.corpus, &fresh).map_err(|e| e.to_string())?;
    let (b, _) = evaluate(&fresh, &fresh_head, &fresh_index, &t.data.corpus, &t.data.eval, 3, 3, EvalMode::AlwaysMax)
        .map_err(|e| e.to_string())?;
    check(
        r.recall_hop1 >= 0.90 && r.both_gold_two_hop >= 0.60 && b.recall_hop1 <= 0.05 && b.both_gold_two_hop <= 0.05 && t.train_secs <= 1800.0,
        format!(
            "hop-1 recall@3 {:.3} (need 0.90), 2-hop both-gold {:.3} (need 0.60), untrained {:.3}/{:.3}, trained in {:.0}s",
            r.recall_hop1, r.both_gold_two_hop, b.recall_hop1, b.both_gold_two_hop, t.train_secs
        ),
    )
}

fn entropy_ordering() -> Outcome {
    let t = trained()?;
    let two_hop: Vec<_> = t.data.eval.iter().filter(|e| e.hops == 2).cloned().collect();
    let rep = entropy_experiment(&two_hop, &t.model, &t.data.corpus, 2, 3, 7).map_err(|e| e.to_string())?;
    let counts: Vec<usize> = rep.cells.iter().map(|c| c.entropies.len()).collect();
    let m: Vec<f64> = (0..=2).map(|k| rep.median(k).unwrap_or(f64::NAN)).collect();
    check(
        counts.iter().all(|&c| c >= 200) && m[0] > m[1] && m[1] > m[2],
        format!("medians k=0 {:.3}, k=1 {:.3}, k=2 {:.3}; n per cell {counts:?}", m[0], m[1], m[2]),
    )
}

fn adaptive_control() -> Outcome {
    let t = trained()?;
    let (a, full) = (report(t, EvalMode::Adaptive), report(t, EvalMode::AlwaysMax));
    check(
        full.control_accuracy >= 0.85 && a.mean_turns < full.mean_turns && full.em - a.em <= 0.02,
        format!(
            "control accuracy {:.3} (need 0.85); turns {:.2} vs {:.2}; EM {:.3} vs {:.3}",
            full.control_accuracy, a.mean_turns, full.mean_turns, a.em, full.em
        ),
    )
}

fn em_ordering() -> Outcome {
    let t = trained()?;
    let (a, s, n) = (report(t, EvalMode::Adaptive), report(t, EvalMode::SingleShot), report(t, EvalMode::NoRetrieval));
    check(
        a.em > s.em && s.em > n.em,
        format!("EM loop {:.3}, single-shot {:.3}, no retrieval {:.3}", a.em, s.em, n.em),
    )
}

fn persistence() -> Outcome {
    let data = common::world(40, 10, 2, 2);
    let (model, head) = common::small_model(&data, 16, 2, 6);
    let path = std::path::Path::new("mem.ckpt");
    let bytes = encode_checkpoint(&model, &head);
    let (m2, h2) = decode_checkpoint(path, &bytes).map_err(|e| e.to_string())?;
    if encode_checkpoint(&m2, &h2) != bytes || m2.fingerprint() != model.fingerprint() {
        return Err("checkpoint round trip changed bytes".into());
    }
    let same_bits = model
        .params()
        .iter()
        .zip(m2.params().iter())
        .all(|(a, b)| a.name == b.name && a.value.data().iter().map(|x| x.to_bits()).eq(b.value.data().iter().map(|x| x.to_bits())));
    if !same_bits {
        return Err("checkpoint parameters differ after reload".into());
    }
    let index = VectorIndex::build(&data.corpus, &model).map_err(|e| e.to_string())?;
    let ib = index.to_bytes();
    let back = VectorIndex::from_bytes(path, &ib).map_err(|e| e.to_string())?;
    if back.to_bytes() != ib || back.doc_ids() != index.doc_ids() {
        return Err("index round trip changed bytes".into());
    }
    let mut rejected = 0;
    let mut trials = 0;
    for (blob, is_ckpt) in [(&bytes, true), (&ib, false)] {
        for pos in [0usize, 5, blob.len() / 2, blob.len() - 1] {
            let mut bad = blob.clone();
            bad[pos] ^= 0x40;
            trials += 1;
            let err = if is_ckpt { decode_checkpoint(path, &bad).err() } else { VectorIndex::from_bytes(path, &bad).err() };
            rejected += usize::from(matches!(err, Some(Error::Corrupt { .. })));
        }
        let short = &blob[..blob.len() - 3];
        trials += 1;
        let err = if is_ckpt { decode_checkpoint(path, short).err() } else { VectorIndex::from_bytes(path, short).err() };
        rejected += usize::from(matches!(err, Some(Error::Corrupt { .. })));
    }
    check(
        rejected == trials,
        format!("bit-exact checkpoint and index round trips; {rejected}/{trials} corrupted files rejected"),
    )
}
