//! Runs the `seqrec` binary end to end on small synthetic corpora.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn seqrec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seqrec")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = seqrec(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(args: &[&str]) -> i32 {
    seqrec(args).status.code().unwrap()
}

fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthetic corpus of `matches` matches over 20 items, seed 7.
fn synth(root: &Path, matches: usize) -> PathBuf {
    let d = root.join("d");
    ok(&["synth", "--matches", &matches.to_string(), "--items", "20", "--seed", "7", "--out", s(&d)]);
    d
}

fn split(root: &Path, data: &Path) -> PathBuf {
    let sp = root.join("sp");
    ok(&["split", "--data", s(data), "--train", "0.8", "--val", "0.1", "--test", "0.1", "--out", s(&sp)]);
    sp
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn synth_then_stats_counts_every_match() {
    let t = tempfile::tempdir().unwrap();
    let d = synth(t.path(), 100);
    let st = t.path().join("st");
    ok(&["stats", "--data", s(&d), "--out", s(&st)]);
    let v = json(st.join("stats.json"));
    assert_eq!(v["pre_filter"]["n_matches"], 100);
    assert!(v["post_filter"]["n_matches"].as_u64().unwrap() <= 100);

    let inv = json(st.join("invocation.json"));
    assert_eq!(inv["command"], "stats");
    assert_eq!(inv["seed"], 0);
    assert_eq!(inv["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(inv["args"][0], "stats");
}

#[test]
fn default_split_is_94_1_5_with_a_boundary_report() {
    let t = tempfile::tempdir().unwrap();
    let d = synth(t.path(), 400);
    let sp = t.path().join("sp");
    ok(&["split", "--data", s(&d), "--no-preprocess", "--out", s(&sp)]);
    let r = json(sp.join("split_report.json"));
    assert_eq!(r["matches"], 400);
    assert_eq!(r["boundaries"], serde_json::json!([376, 380]));
    let sizes: Vec<u64> = r["parts"].as_array().unwrap().iter().map(|p| p["matches"].as_u64().unwrap()).collect();
    assert_eq!(sizes, [376, 4, 20]);
    for f in ["train.jsonl", "val.jsonl", "test.jsonl", "items.csv", "heroes.csv"] {
        assert!(sp.join(f).is_file(), "{f} missing");
    }
    // chronological: every training match starts no later than any test match
    let (tr, te) = (&r["parts"][0], &r["parts"][2]);
    assert!(tr["last_start_time"].as_i64().unwrap() <= te["first_start_time"].as_i64().unwrap());
}

#[test]
fn train_eval_report_pipeline() {
    let t = tempfile::tempdir().unwrap();
    let d = synth(t.path(), 200);
    let sp = split(t.path(), &d);
    let tr = t.path().join("tr");
    ok(&[
        "train", "--model", "gru", "--data", s(&sp), "--emb", "8", "--cell", "16", "--layers", "2", "--dropout", "0.1",
        "--epochs", "2", "--seed", "3", "--out", s(&tr),
    ]);
    let m = json(tr.join("manifest.json"));
    assert_eq!(m["seed"], 3);
    assert_eq!(m["model"]["kind"], "gru");
    assert_eq!(m["model"]["cell"], 16);
    assert!(tr.join("model.ckpt").is_file());

    let ev = t.path().join("ev");
    ok(&["eval", "--checkpoint", s(&tr.join("model.ckpt")), "--data", s(&sp), "--out", s(&ev)]);
    let rep = json(ev.join("eval_report.json"));
    let recall = rep["metrics"][0]["recall"].as_f64().unwrap();
    assert_eq!(rep["metrics"][0]["k"], 1);
    assert_eq!(recall, rep["metrics"][0]["ndcg"].as_f64().unwrap());

    let rp = t.path().join("rp");
    ok(&["report", "--reports", s(&ev.join("eval_report.json")), "--out", s(&rp)]);
    let csv = std::fs::read_to_string(rp.join("leaderboard.csv")).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines.len(), 2, "header plus one row: {csv}");
    assert!(lines[1].starts_with("gru,"));
}

#[test]
fn oracle_eval_and_plot_pass_through() {
    let t = tempfile::tempdir().unwrap();
    let d = synth(t.path(), 150);
    let sp = split(t.path(), &d);
    let ev = t.path().join("ev");
    ok(&["eval", "--oracle", s(&d.join("oracle.json")), "--data", s(&sp), "--k", "1,3,5", "--out", s(&ev)]);
    let rep = json(ev.join("eval_report.json"));
    assert_eq!(rep["model"], "oracle");
    assert_eq!(rep["metrics"].as_array().unwrap().len(), 3);

    let pl = t.path().join("pl");
    ok(&[
        "plotdata", "--data", s(&d), "--series", "item-purchase-time", "--item", "3", "--bin", "60", "--window", "5",
        "--out", s(&pl),
    ]);
    let plot = pl.join("plot_item_purchase_time_3.csv");
    let rp = t.path().join("rp");
    ok(&["report", "--reports", s(&ev.join("eval_report.json")), "--plots", s(&plot), "--out", s(&rp)]);
    assert_eq!(
        std::fs::read(&plot).unwrap(),
        std::fs::read(rp.join("plots/plot_item_purchase_time_3.csv")).unwrap()
    );
}

#[test]
fn identical_invocations_are_byte_identical() {
    let t = tempfile::tempdir().unwrap();
    let d = synth(t.path(), 120);
    let sp = split(t.path(), &d);
    let run = |name: &str| {
        let out = t.path().join(name);
        ok(&[
            "train", "--model", "narm", "--data", s(&sp), "--emb", "6", "--enc", "8", "--epochs", "2", "--seed", "11",
            "--out", s(&out),
        ]);
        read_dir_bytes(&out)
    };
    let (a, b) = (run("a"), run("b"));
    let file = |v: &[(String, Vec<u8>)], name: &str| v.iter().find(|(n, _)| n == name).unwrap().1.clone();
    assert_eq!(file(&a, "model.ckpt"), file(&b, "model.ckpt"));
    // the manifest differs only in the checkpoint path it records
    let manifest = |v: &[(String, Vec<u8>)]| {
        let mut m: Value = serde_json::from_slice(&file(v, "manifest.json")).unwrap();
        m["checkpoint_path"] = Value::Null;
        m
    };
    assert_eq!(manifest(&a), manifest(&b));

    // synth is byte-stable across all files except the invocation record
    let d2 = t.path().join("d2");
    ok(&["synth", "--matches", "120", "--items", "20", "--seed", "7", "--out", s(&d2)]);
    let drop_inv = |v: Vec<(String, Vec<u8>)>| -> Vec<(String, Vec<u8>)> {
        v.into_iter().filter(|(n, _)| n != "invocation.json").collect()
    };
    assert_eq!(drop_inv(read_dir_bytes(&d)), drop_inv(read_dir_bytes(&d2)));
}

#[test]
fn search_writes_trials_and_best_checkpoint() {
    let t = tempfile::tempdir().unwrap();
    let d = synth(t.path(), 120);
    let sp = split(t.path(), &d);
    let se = t.path().join("se");
    ok(&[
        "search", "--model", "mlp", "--data", s(&sp), "--trials", "3", "--jobs", "2", "--epochs", "1", "--seed", "5",
        "--out", s(&se),
    ]);
    let sum = json(se.join("search_summary.json"));
    assert_eq!(sum["trials"].as_array().unwrap().len(), 3);
    let best = sum["best_trial"].as_u64().unwrap() as usize;
    assert!(sum["trials"][best]["manifest"]["checkpoint_path"].is_string());
    for i in 0..3 {
        assert!(se.join(format!("trials/trial_{i:03}.json")).is_file());
    }
    assert!(se.join("best.ckpt").is_file());
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["stats", "--data", "x"]), 1);
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["--version"]), 0);

    let t = tempfile::tempdir().unwrap();
    let d = synth(t.path(), 100);
    let sp = split(t.path(), &d);
    let out = t.path().join("o");
    // flag that the model does not have
    assert_eq!(code(&["train", "--model", "gru", "--hidden", "8", "--data", s(&sp), "--out", s(&out)]), 1);
    assert_eq!(code(&["train", "--model", "transformer", "--data", s(&sp), "--out", s(&out)]), 1);
    assert_eq!(code(&["train", "--model", "pop", "--lr", "-1", "--data", s(&sp), "--out", s(&out)]), 1);
    assert_eq!(code(&["split", "--data", s(&d), "--train", "0.5", "--out", s(&out)]), 1);
}

#[test]
fn data_errors_exit_2() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("o");
    let missing = t.path().join("missing");
    assert_eq!(code(&["stats", "--data", s(&missing), "--out", s(&out)]), 2);
    assert_eq!(code(&["report", "--reports", s(&missing.join("r.json")), "--out", s(&out)]), 2);

    let d = synth(t.path(), 100);
    std::fs::write(d.join("matches.jsonl"), "{not json\n").unwrap();
    assert_eq!(code(&["stats", "--data", s(&d), "--out", s(&out)]), 2);
}

#[test]
fn divergence_exits_3_with_manifest() {
    let t = tempfile::tempdir().unwrap();
    let d = synth(t.path(), 100);
    let sp = split(t.path(), &d);
    let out = t.path().join("o");
    let args = ["train", "--model", "mlp", "--lr", "1e300", "--epochs", "2", "--data", s(&sp), "--out", s(&out)];
    assert_eq!(code(&args), 3);
    let m = json(out.join("manifest.json"));
    assert_eq!(m["diverged_at_epoch"], 1);
    assert!(!out.join("model.ckpt").exists());
}
