use std::path::Path;
use std::process::{Command, Output};

fn prettr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prettr"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("one JSON report on stdout")
}

fn error_line(out: &Output) -> serde_json::Value {
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(err.lines().last().unwrap()).expect("machine-readable error")
}

const SMALL: &str = "version = 1\n[synth]\nqueries = 4\ncandidates_per_query = 6\n[train]\nmax_batches = 8\nvalidate_every = 4\nbatch_size = 2\n[pretrain]\nmax_pairs = 32\neval_every = 2\n[bench]\ndocs_per_query = 3\nwarmups = 0\n";

#[test]
fn index_and_rerank_produce_a_stable_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("c.toml"), SMALL).unwrap();
    let synth = json(&prettr(d, &["--config", "c.toml", "synth", "--out", "data"]));
    assert_eq!(synth["docs"], 24);
    let index = json(&prettr(d, &["--config", "c.toml", "index", "--corpus", "data/corpus.jsonl", "--out", "s.bin"]));
    assert_eq!(index["docs_indexed"], 24);
    assert_eq!(index["store"]["payload_bytes"].as_f64(), index["projected_payload_bytes"].as_f64());

    let rerank = |out: &str| {
        json(&prettr(
            d,
            &[
                "--config", "c.toml", "rerank", "--store", "s.bin", "--queries", "data/queries.tsv", "--run",
                "data/candidates.run", "--out", out, "--qrels", "data/qrels.txt",
            ],
        ))
    };
    let report = rerank("a.run");
    assert_eq!(report["entries"], 24);
    rerank("b.run");
    let a = std::fs::read_to_string(d.join("a.run")).unwrap();
    assert_eq!(a, std::fs::read_to_string(d.join("b.run")).unwrap());
    assert!(a.lines().all(|l| l.split(' ').count() == 6 && l.ends_with(" prettr")));

    let stale = prettr(
        d,
        &[
            "--config", "c.toml", "--seed", "5", "rerank", "--store", "s.bin", "--queries", "data/queries.tsv", "--run",
            "data/candidates.run", "--out", "c.run",
        ],
    );
    assert!(error_line(&stale)["error"].as_str().unwrap().contains("stale"));
}

#[test]
fn train_pretrain_and_bench_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("c.toml"), SMALL).unwrap();
    json(&prettr(d, &["--config", "c.toml", "synth", "--out", "data"]));
    let train = |out: &str| {
        json(&prettr(
            d,
            &[
                "--config", "c.toml", "--threads", "2", "train", "--corpus", "data/corpus.jsonl", "--queries",
                "data/queries.tsv", "--qrels", "data/qrels.txt", "--run", "data/candidates.run", "--out", out, "--log",
                "log.jsonl",
            ],
        ))
    };
    let (a, b) = (train("a.ck"), train("b.ck"));
    assert_eq!(a["fingerprint"], b["fingerprint"]);
    assert_eq!(std::fs::read(d.join("a.ck")).unwrap(), std::fs::read(d.join("b.ck")).unwrap());
    assert_eq!(std::fs::read_to_string(d.join("log.jsonl")).unwrap().lines().count(), 8);

    let pre = json(&prettr(d, &["--config", "c.toml", "pretrain-compressor", "--corpus", "data/corpus.jsonl", "--checkpoint", "a.ck", "--out", "p.ck"]));
    assert!(pre["best_held_out"].as_f64().unwrap() <= pre["initial_held_out"].as_f64().unwrap());

    let bench = json(&prettr(
        d,
        &["--config", "c.toml", "bench", "--corpus", "data/corpus.jsonl", "--queries", "data/queries.tsv", "--checkpoint", "p.ck", "--csv", "b.csv"],
    ));
    assert_eq!(bench.as_array().unwrap().len(), 3);
    let csv = std::fs::read_to_string(d.join("b.csv")).unwrap();
    assert_eq!(prettr::bench::parse_report_csv(&csv).unwrap().len(), 3);
}

#[test]
fn estimate_reports_decimal_units() {
    let dir = tempfile::tempdir().unwrap();
    let r = json(&prettr(dir.path(), &["--precision", "f32", "estimate", "--docs", "50e6", "--avg-tokens", "729.2", "--width", "768"]));
    assert!((r["terabytes"].as_f64().unwrap() - 112.0).abs() < 0.01);
    let r = json(&prettr(dir.path(), &["--precision", "f32", "estimate", "--docs", "528000", "--bytes", "195e9", "--width", "256"]));
    assert!((r["avg_tokens"].as_f64().unwrap() - 360.7).abs() < 0.1);
}

#[test]
fn bad_input_fails_with_a_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.toml"), "version = 1\nlearning_rate = 3\n").unwrap();
    let e = error_line(&prettr(d, &["--config", "bad.toml", "estimate", "--docs", "1", "--avg-tokens", "1"]));
    assert!(e["error"].as_str().unwrap().contains("learning_rate"));
    error_line(&prettr(d, &["--split-layer", "9", "estimate", "--docs", "1", "--avg-tokens", "1"]));
    error_line(&prettr(d, &["index", "--corpus", "missing.jsonl", "--out", "s.bin"]));
    let out = prettr(d, &["--precision", "f8", "estimate", "--docs", "1", "--avg-tokens", "1"]);
    assert!(!out.status.success());
}

#[test]
fn every_command_prints_its_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = prettr(dir.path(), &["--seed", "42", "--comp-dim", "8", "estimate", "--docs", "10", "--avg-tokens", "5"]);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("# seed 42"));
    assert!(err.contains("comp_dim = 8"));
    assert_eq!(json(&out)["comp_dim"], 8);
}
