use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scone(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scone"))
        .args(args)
        .env("SCONE_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = scone(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SPEC: &str = "n = 300\nclusters = 3\nseed = 4\nviews = rna, protein\n\
view.rna.dim = 20\nview.rna.separation = 4\nview.protein.dim = 10\nview.protein.separation = 4\n\
survival.hazard_ratio = 3\n";

/// synth -> preprocess -> train -> embed -> cluster; returns the run directory.
fn pipeline(root: &Path, epochs: &str) -> PathBuf {
    let spec = root.join("spec.txt");
    std::fs::write(&spec, SPEC).unwrap();
    let raw = root.join("raw");
    ok(&["synth", "--spec", s(&spec), "--out", s(&raw)]);
    let prep = root.join("prep");
    std::fs::create_dir_all(&prep).unwrap();
    for v in ["rna", "protein"] {
        ok(&[
            "preprocess",
            "--input",
            s(&raw.join(format!("{v}.tsv"))),
            "--steps",
            "zscore",
            "--out",
            s(&prep.join(format!("{v}.tsv"))),
        ]);
    }
    let model = root.join("model");
    ok(&[
        "train",
        "--view",
        s(&prep.join("rna.tsv")),
        "--view",
        s(&prep.join("protein.tsv")),
        "--epochs",
        epochs,
        "--seed",
        "11",
        "--out",
        s(&model),
    ]);
    ok(&[
        "embed",
        "--checkpoint",
        s(&model.join("checkpoint.json")),
        "--view",
        s(&prep.join("protein.tsv")),
        "--view",
        s(&prep.join("rna.tsv")),
        "--out",
        s(&root.join("embedding.tsv")),
    ]);
    ok(&[
        "cluster",
        "--embedding",
        s(&root.join("embedding.tsv")),
        "--best-modularity",
        "--seed",
        "5",
        "--out",
        s(&root.join("partition.tsv")),
    ]);
    root.to_path_buf()
}

#[test]
fn end_to_end_recovers_clusters() {
    let dir = tempfile::tempdir().unwrap();
    let root = pipeline(dir.path(), "50");
    let metrics = root.join("metrics.json");
    ok(&[
        "evaluate",
        "--partition",
        s(&root.join("partition.tsv")),
        "--truth",
        s(&root.join("raw/labels.tsv")),
        "--survival",
        s(&root.join("raw/survival.tsv")),
        "--out",
        s(&metrics),
    ]);
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&metrics).unwrap()).unwrap();
    let ari = doc["ari"].as_f64().unwrap();
    assert!(ari >= 0.8, "ari {ari}");
    assert!(doc["ami"].as_f64().unwrap() > 0.0);
    assert!(doc["logrank"]["neg_log10_p"].as_f64().unwrap() > 2.0);
    let log = std::fs::read_to_string(root.join("model/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 50);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("model/checkpoint.json.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 11);
    assert_eq!(manifest["config"]["epochs"], "50");
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 2);
}

#[test]
fn seeded_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path(), "5");
    pipeline(b.path(), "5");
    for f in ["embedding.tsv", "partition.tsv", "model/checkpoint.json", "raw/rna.tsv"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn missing_view_file_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = scone(&["train", "--view", "no_such_view.tsv", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_view.tsv"));
}

#[test]
fn checkpoint_dimension_mismatch_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let root = pipeline(dir.path(), "1");
    let other = root.join("other");
    std::fs::create_dir_all(&other).unwrap();
    let mut text = String::from("id\tf0\tf1\n");
    for i in 0..40 {
        text.push_str(&format!("s{i:04}\t{}\t{}\n", i as f64 * 0.1, 1.0 - i as f64 * 0.05));
    }
    std::fs::write(other.join("rna.tsv"), &text).unwrap();
    let out = scone(&[
        "embed",
        "--checkpoint",
        s(&root.join("model/checkpoint.json")),
        "--view",
        s(&other.join("rna.tsv")),
        "--view",
        s(&root.join("prep/protein.tsv")),
        "--out",
        s(&root.join("bad.tsv")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dimension"));
}

#[test]
fn tampered_inputs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let root = pipeline(dir.path(), "1");
    let emb = root.join("embedding.tsv");
    let text = std::fs::read_to_string(&emb).unwrap();
    std::fs::write(&emb, text.replacen('1', "2", 1)).unwrap();
    let out = scone(&["cluster", "--embedding", s(&emb), "--best-modularity", "--out", s(&root.join("p2.tsv"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("digest"));
}

#[test]
fn cluster_mode_flags_are_exclusive_and_required() {
    let dir = tempfile::tempdir().unwrap();
    let emb = dir.path().join("e.tsv");
    std::fs::write(&emb, "id\tz0\na\t1\n").unwrap();
    let out_path = dir.path().join("p.tsv");
    let none = scone(&["cluster", "--embedding", s(&emb), "--out", s(&out_path)]);
    assert_eq!(none.status.code(), Some(2));
    let both = scone(&[
        "cluster",
        "--embedding",
        s(&emb),
        "--best-modularity",
        "--target-k",
        "3",
        "--out",
        s(&out_path),
    ]);
    assert_eq!(both.status.code(), Some(2));
    let low = scone(&["cluster", "--embedding", s(&emb), "--target-k", "1", "--out", s(&out_path)]);
    assert_eq!(low.status.code(), Some(1));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let root = pipeline(dir.path(), "1");
    let cfg = root.join("train.cfg");
    std::fs::write(&cfg, "epochs = 4\nhidden = 16\nlatent = 8\n").unwrap();
    let out = root.join("model2");
    ok(&[
        "train",
        "--view",
        s(&root.join("prep/rna.tsv")),
        "--config",
        s(&cfg),
        "--epochs",
        "2",
        "--out",
        s(&out),
    ]);
    let log = std::fs::read_to_string(out.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let ckpt = std::fs::read_to_string(out.join("checkpoint.json")).unwrap();
    assert!(ckpt.contains("\"hidden\":16"));
}

#[test]
fn preprocess_steps_apply_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("adt.tsv");
    std::fs::write(&input, "id\tp1\tp2\tp3\na\t10\t0\t5\nb\t1\t2\t3\nc\t0\t0\t8\n").unwrap();
    let out = dir.path().join("adt_clr.tsv");
    ok(&["preprocess", "--input", s(&input), "--steps", "counts:100,clr", "--out", s(&out)]);
    let text = std::fs::read_to_string(&out).unwrap();
    for line in text.lines().skip(1) {
        let sum: f64 = line.split('\t').skip(1).map(|v| v.parse::<f64>().unwrap()).sum();
        assert!(sum.abs() < 1e-9, "{line}");
    }
    let bad = scone(&["preprocess", "--input", s(&input), "--steps", "log2", "--out", s(&out)]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn bench_writes_one_row_per_record() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench.tsv");
    ok(&[
        "bench", "--n", "60,120,240", "--hidden", "8", "--latent", "4", "--k-k", "5", "--out", s(&out),
    ]);
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 7);
    assert!(text.lines().skip(1).all(|l| l.ends_with("false")));
    let bad = scone(&["bench", "--n", "200,100", "--out", s(&out)]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn help_documents_flags() {
    let out = ok(&["train", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for flag in ["--view", "--config", "--epochs", "--k-s", "--seed", "SCONE_THREADS"] {
        assert!(text.contains(flag), "{flag}");
    }
}
