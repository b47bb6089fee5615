use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

const SUBCOMMANDS: [&str; 11] = [
    "synth",
    "chunk",
    "gen-data",
    "pretrain",
    "encode-corpus",
    "build-index",
    "finetune",
    "eval-retrieval",
    "eval-qa",
    "query",
    "ablation",
];

/// Settings small enough for a full pipeline in a few seconds.
const TINY: &str = r#"
synth_topics = 4
synth_docs_per_topic = 20
synth_train = 40
synth_dev = 10
synth_test = 10
n_buckets = 4096
hidden_dim = 16
index_dim = 8
batch_size = 4
accumulation_steps = 1
total_updates = 20
recluster_every = 10
num_clusters = 2
learning_rate = 1e-2
ncells = 4
nprobe = 2
early_candidates = 20
cache_depth = 40
finetune_learning_rate = 1e-3
reader_learning_rate = 1e-3
recall_ks = [1, 5]
"#;

fn qaret(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qaret"))
        .current_dir(dir)
        .env_remove("QARET_CONFIG")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = qaret(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn error_line(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "expected one error line, got {stderr:?}");
    serde_json::from_str(lines[0]).unwrap()
}

fn tiny_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

#[test]
fn help_lists_every_flag_with_default() {
    let dir = tempfile::tempdir().unwrap();
    for sub in SUBCOMMANDS {
        let out = qaret(dir.path(), &[sub, "--help"]);
        assert!(out.status.success(), "{sub}");
        let text = String::from_utf8(out.stdout).unwrap();
        for flag in ["--config", "--seed", "--threads", "--total-updates", "--shared-norm", "--retrieval-weight", "--nprobe"] {
            assert!(text.contains(flag), "{sub} help lacks {flag}");
        }
        let flags = text.lines().filter(|l| l.trim_start().starts_with("--")).count();
        let defaults = text.matches("[default: ").count();
        assert!(flags >= 60, "{sub}: only {flags} flags");
        assert_eq!(flags, defaults, "{sub}: every flag shows a default");
    }
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = qaret(dir.path(), &["chunk", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"], "usage");

    let out = qaret(dir.path(), &["chunk", "--seed", "minus-one"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_path_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = qaret(dir.path(), &["chunk", "--corpus", "absent.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    let err = error_line(&out);
    assert_eq!(err["error"], "usage");
    assert!(err["message"].as_str().unwrap().contains("absent.jsonl"));

    let out = qaret(dir.path(), &["chunk", "--config", "absent.toml"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "no_such_field = 1\n").unwrap();
    let out = qaret(dir.path(), &["chunk", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"], "usage");

    let out = qaret(dir.path(), &["chunk", "--search", "hnsw"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_failure_exits_one_with_one_json_line() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("corpus.jsonl"), "{not json\n").unwrap();
    let out = qaret(dir.path(), &["chunk", "--corpus", "corpus.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    let err = error_line(&out);
    assert_eq!(err["error"], "runtime");
    assert!(err["message"].as_str().unwrap().contains("corpus.jsonl"));
}

#[test]
fn empty_corpus_gives_empty_store() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("corpus.jsonl"), "").unwrap();
    ok(dir.path(), &["chunk", "--corpus", "corpus.jsonl", "--chunks", "chunks.jsonl"]);
    assert_eq!(std::fs::read_to_string(dir.path().join("chunks.jsonl")).unwrap(), "");
    assert!(dir.path().join("chunks.jsonl.meta.json").exists());
}

#[test]
fn zero_updates_writes_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["pretrain", "--total-updates", "0", "--n-buckets", "512", "--pretrain-dir", "ckpt"];
    ok(dir.path(), &args);
    let q = dir.path().join("ckpt/question.ckpt");
    let p = dir.path().join("ckpt/paragraph.ckpt");
    let (cfg, params) = qaret_core::encoder::EncoderParams::load(&q).unwrap();
    assert_eq!(cfg.n_buckets, 512);
    assert_eq!(params.embedding.shape(), (512, cfg.hidden_dim));
    assert!(p.exists());
    assert!(!dir.path().join("ckpt/optimizer.bin").exists());

    // Seeded: the same command gives the same bytes.
    let first = std::fs::read(&q).unwrap();
    ok(dir.path(), &args);
    assert_eq!(first, std::fs::read(&q).unwrap());
}

#[test]
fn config_file_and_env_feed_the_fingerprint() {
    let dir = tiny_dir();
    ok(dir.path(), &["synth", "--config", "tiny.toml"]);
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("data/corpus.jsonl.meta.json")).unwrap()).unwrap();
    let fp = meta["fingerprint"].as_str().unwrap().to_string();
    assert_eq!(fp.len(), 64);

    let out = Command::new(env!("CARGO_BIN_EXE_qaret"))
        .current_dir(dir.path())
        .env("QARET_CONFIG", "tiny.toml")
        .args(["synth", "--threads", "2"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("data/corpus.jsonl.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["fingerprint"], fp.as_str());

    ok(dir.path(), &["synth", "--config", "tiny.toml", "--seed", "4"]);
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("data/corpus.jsonl.meta.json")).unwrap()).unwrap();
    assert_ne!(meta["fingerprint"], fp.as_str());
}

#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tiny_dir();
    let d = dir.path();
    let cfg = ["--config", "tiny.toml"];
    for stage in ["synth", "chunk", "gen-data", "pretrain", "encode-corpus", "build-index"] {
        ok(d, &[&[stage][..], &cfg].concat());
    }
    let para = std::fs::read(d.join("work/pretrain/paragraph.ckpt")).unwrap();
    let index = std::fs::read(d.join("work/index.bin")).unwrap();
    ok(d, &[&["finetune"][..], &cfg].concat());
    assert_eq!(para, std::fs::read(d.join("work/pretrain/paragraph.ckpt")).unwrap());
    assert_eq!(index, std::fs::read(d.join("work/index.bin")).unwrap());

    ok(d, &[&["eval-retrieval"][..], &cfg].concat());
    ok(d, &[&["eval-qa"][..], &cfg].concat());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("work/qa_report.json")).unwrap()).unwrap();
    assert_eq!(report["records"].as_array().unwrap().len(), 10);
    assert!(report["em"].as_f64().is_some());
    assert_eq!(report["fingerprint"].as_str().unwrap().len(), 64);
    let retrieval: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("work/retrieval_report.json")).unwrap()).unwrap();
    assert!(retrieval["recall_at"]["5"].as_f64().unwrap() >= retrieval["recall_at"]["1"].as_f64().unwrap());

    let mut child = Command::new(env!("CARGO_BIN_EXE_qaret"))
        .current_dir(d)
        .env_remove("QARET_CONFIG")
        .args(["query", "--config", "tiny.toml"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"who founded the city?\n\nwhen was it built?\n")
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let lines: Vec<serde_json::Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["question"], "who founded the city?");
    for l in &lines {
        let keys: Vec<&String> = l.as_object().unwrap().keys().collect();
        assert_eq!(keys, ["chunk_id", "combined_score", "prediction", "question"]);
    }

    // A rerun of pretraining reproduces the checkpoint bytes.
    ok(d, &[&["pretrain", "--pretrain-dir", "again"][..], &cfg].concat());
    assert_eq!(para, std::fs::read(d.join("again/paragraph.ckpt")).unwrap());
}

#[test]
fn ablation_writes_a_table() {
    let dir = tiny_dir();
    let d = dir.path();
    let cfg = ["--config", "tiny.toml"];
    ok(d, &[&["synth"][..], &cfg].concat());
    ok(d, &[&["chunk"][..], &cfg].concat());
    let out = ok(d, &[&["ablation", "--search", "flat"][..], &cfg].concat());
    assert!(out.contains("progressive"));
    let table: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("work/ablation/ablation.json")).unwrap()).unwrap();
    let names: Vec<&str> = table["table"]["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["name"].as_str().unwrap())
        .collect();
    assert_eq!(names, ["progressive", "no-clustering", "ict"]);
}
