//! Command-level acceptance checks: manifest replay reproduces outputs
//! bitwise, and the gradient-check command meets its runtime budget.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fewshot"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn fewshot")
}

fn assert_success(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

#[test]
fn acceptance_6_manifest_replay_is_bitwise() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = run(&[
        "gen-data",
        "--classes",
        "8",
        "--per-class",
        "8",
        "--size",
        "8",
        "--cell",
        "4",
        "--seed",
        "21",
        "--out",
        data.to_str().unwrap(),
    ]);
    assert_success(&out, "gen-data");

    let emb = tmp.path().join("emb.tsv");
    let out = run(&[
        "gen-embeddings",
        "--data",
        data.to_str().unwrap(),
        "--dim",
        "8",
        "--seed",
        "4",
        "--aligned",
        "--out",
        emb.to_str().unwrap(),
    ]);
    assert_success(&out, "gen-embeddings");

    let pre = tmp.path().join("pre.ckpt");
    let out = run(&[
        "pretrain",
        "--data",
        data.to_str().unwrap(),
        "--depth",
        "2",
        "--width",
        "16",
        "--heads",
        "2",
        "--patch",
        "4",
        "--mlp-ratio",
        "2",
        "--epochs",
        "2",
        "--batch",
        "16",
        "--seed",
        "5",
        "--out",
        pre.to_str().unwrap(),
    ]);
    assert_success(&out, "pretrain");

    let meta = tmp.path().join("meta.ckpt");
    let curve = tmp.path().join("meta_curve.csv");
    let out = run(&[
        "metatrain",
        "--data",
        data.to_str().unwrap(),
        "--checkpoint",
        pre.to_str().unwrap(),
        "--embeddings",
        emb.to_str().unwrap(),
        "--mechanism",
        "both",
        "--epochs",
        "1",
        "--episodes",
        "5",
        "--ways",
        "2",
        "--queries",
        "2",
        "--seed",
        "9",
        "--out",
        meta.to_str().unwrap(),
        "--curve",
        curve.to_str().unwrap(),
    ]);
    assert_success(&out, "metatrain");

    let snapshot = |p: &Path| fs::read(p).unwrap();
    let ckpt_before = snapshot(&meta);
    let curve_before = snapshot(&curve);
    let manifest = tmp.path().join("meta.ckpt.manifest.json");
    assert!(manifest.exists(), "metatrain must write a manifest");

    // also replay the generator: dataset files must come back identical
    let record = data.join("base").join("00000_c000.bin");
    let record_before = snapshot(&record);

    let out = run(&["replay", "--manifest", manifest.to_str().unwrap()]);
    assert_success(&out, "replay metatrain");
    let ckpt_after = snapshot(&meta);
    let curve_after = snapshot(&curve);

    let out = run(&[
        "replay",
        "--manifest",
        data.join("manifest.json").to_str().unwrap(),
    ]);
    assert_success(&out, "replay gen-data");
    let record_after = snapshot(&record);

    let ok = ckpt_before == ckpt_after && curve_before == curve_after && record_before == record_after;
    println!(
        "[{}] criterion 6 (command half): manifest replay reproduces checkpoint, curve and dataset files bitwise",
        verdict(ok)
    );
    assert!(ckpt_before == ckpt_after, "checkpoint differs after replay");
    assert!(curve_before == curve_after, "curve differs after replay");
    assert!(record_before == record_after, "dataset record differs after replay");
}

#[test]
fn acceptance_1_gradcheck_command_budget() {
    let start = Instant::now();
    let out = run(&["gradcheck"]);
    let elapsed = start.elapsed();
    let ok = out.status.success() && elapsed.as_secs() < 60;
    println!(
        "[{}] criterion 1 (command): gradcheck exit {:?} in {:.1?} (< 60 s)",
        verdict(ok),
        out.status.code(),
        elapsed
    );
    assert_success(&out, "gradcheck");
    assert!(elapsed.as_secs() < 60, "took {elapsed:?}");
}
