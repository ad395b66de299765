use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_latent-rag"))
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().expect("spawn")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stdout: {}\nstderr: {}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
}

fn tiny_world(dir: &Path) {
    ok(&run(&["gen-data", "--out-dir", "data", "--n-entities", "40", "--n-relations", "4", "--n-train", "12", "--n-eval", "6", "--seed", "3"], dir));
}

const MODEL: [&str; 8] = ["--d", "16", "--layers", "1", "--heads", "2", "--max-context", "192"];

fn train(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train", "--corpus", "data/corpus.jsonl", "--train-set", "data/train.jsonl", "--checkpoint", "m.ckpt",
        "--index-out", "m.lidx", "--report", "r.json", "--batch-size", "4", "--max-steps", "2",
    ];
    args.extend(MODEL);
    args.extend(extra);
    run(&args, dir)
}

#[test]
fn train_eval_query_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_world(d);
    ok(&train(d, &[]));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(report["steps"], 2);
    assert!(report["elapsed_secs"].as_f64().unwrap() > 0.0);

    let eval = |out: &str| {
        ok(&run(
            &["eval", "--checkpoint", "m.ckpt", "--index", "m.lidx", "--corpus", "data/corpus.jsonl", "--dataset", "data/eval.jsonl", "--out", out],
            d,
        ));
        std::fs::read_to_string(d.join(out)).unwrap()
    };
    let a = eval("a.json");
    assert_eq!(a, eval("b.json"));
    let v: serde_json::Value = serde_json::from_str(&a).unwrap();
    assert_eq!(v["reports"].as_array().unwrap().len(), 4);

    let q = run(&["query", "--checkpoint", "m.ckpt", "--index", "m.lidx", "--corpus", "data/corpus.jsonl", "who is it?"], d);
    ok(&q);
    assert!(String::from_utf8_lossy(&q.stdout).contains("answer:"));

    ok(&run(&["build-index", "--checkpoint", "m.ckpt", "--corpus", "data/corpus.jsonl", "--out", "again.lidx"], d));
    assert_eq!(std::fs::read(d.join("m.lidx")).unwrap(), std::fs::read(d.join("again.lidx")).unwrap());

    ok(&run(&["entropy", "--checkpoint", "m.ckpt", "--corpus", "data/corpus.jsonl", "--dataset", "data/eval.jsonl", "--out", "h.json"], d));
}

#[test]
fn zero_weights_train_ntp_only() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_world(d);
    ok(&train(d, &["--lambda", "0", "--mu", "0", "--metrics", "m.jsonl"]));
    for line in std::fs::read_to_string(d.join("m.jsonl")).unwrap().lines() {
        let m: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!((m["total"].as_f64().unwrap() - m["ntp_loss"].as_f64().unwrap()).abs() < 1e-9);
    }
}

#[test]
fn config_file_values_yield_to_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_world(d);
    std::fs::write(d.join("c.conf"), "# tiny run\nmax_steps = 1\nlr = 1e-3\n").unwrap();
    ok(&train(d, &["--config", "c.conf"]));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(report["steps"], 2);
    assert_eq!(report["config"]["lr"].as_f64().unwrap() as f32, 1e-3);

    std::fs::write(d.join("bad.conf"), "just words\n").unwrap();
    assert_eq!(train(d, &["--config", "bad.conf"]).status.code(), Some(1));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(run(&["train", "--bogus"], d).status.code(), Some(1));
    assert_eq!(run(&["--help"], d).status.code(), Some(0));
    tiny_world(d);
    assert_eq!(train(d, &["--tau", "0"]).status.code(), Some(1));
    assert_eq!(
        run(&["eval", "--checkpoint", "missing.ckpt", "--index", "x", "--corpus", "data/corpus.jsonl", "--dataset", "data/eval.jsonl", "--out", "o.json"], d)
            .status
            .code(),
        Some(2)
    );

    ok(&train(d, &[]));
    std::fs::rename(d.join("m.lidx"), d.join("first.lidx")).unwrap();
    ok(&train(d, &["--seed", "9"]));
    let stale = run(&["query", "--checkpoint", "m.ckpt", "--index", "first.lidx", "--corpus", "data/corpus.jsonl", "q"], d);
    assert_eq!(stale.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&stale.stderr).contains("fingerprint"));
}
