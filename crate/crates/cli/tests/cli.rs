//! End-to-end tests of the `longwave` binary: artifact shapes, manifest
//! contents, exit codes, config precedence, and resume-through-the-CLI.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use longwave::data;
use longwave::model::load_checkpoint;
use longwave::packing::Document;
use longwave::rope::NtkMode;
use longwave::tokenizer::encode;

const BIN: &str = env!("CARGO_BIN_EXE_longwave");

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary should run")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap_or_else(|e| {
        panic!("reading {}: {e}", path.display());
    }))
    .expect("valid json")
}

/// Repetitive but multi-document corpus for smoke training.
fn write_smoke_corpus(path: &Path) {
    let texts = [
        "The quick brown fox jumps over the lazy dog. ",
        "Pack my box with five dozen liquor jugs. ",
        "How vexingly quick daft zebras jump! ",
    ];
    let docs: Vec<Document> = texts
        .iter()
        .enumerate()
        .map(|(i, t)| Document {
            doc_id: format!("doc{i}"),
            tokens: encode(&t.repeat(12)),
        })
        .collect();
    data::write_corpus(path, &docs).unwrap();
}

fn manifest_outputs(manifest: &serde_json::Value) -> Vec<(String, String)> {
    manifest["outputs"]
        .as_array()
        .expect("outputs array")
        .iter()
        .map(|o| {
            (
                o["path"].as_str().unwrap().to_string(),
                o["sha256"].as_str().unwrap().to_string(),
            )
        })
        .collect()
}

fn sha256_hex(path: &Path) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(fs::read(path).unwrap()))
}

#[test]
fn rope_report_writes_reports_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        dir.path(),
        &[
            "rope-report",
            "--base",
            "500000",
            "--head-dim",
            "128",
            "--train-ctx",
            "4096",
            "--target-ctx",
            "4096",
            "--mode",
            "diffusion",
        ],
    );
    assert_ok(&out);

    let json = read_json(&dir.path().join("rope-report.json"));
    assert_eq!(json["critical_dim"], 70);
    assert_eq!(json["mode"], "diffusion");
    assert_eq!(json["span_trained"], 8192);

    let csv = fs::read_to_string(dir.path().join("rope-report.csv")).unwrap();
    assert!(csv.starts_with("pair_index,dimension,period_before,period_after,covers_T_Ecap\n"));
    assert_eq!(csv.lines().count(), 65); // header + 64 pairs

    let manifest = read_json(&dir.path().join("rope-report.manifest.json"));
    assert_eq!(manifest["tool"], "longwave");
    assert_eq!(manifest["command"], "rope-report");
    assert_eq!(manifest["seed"], 0);
    assert_eq!(manifest["error"], serde_json::Value::Null);
    assert_eq!(manifest["config"]["mode"], "diffusion");
    let outputs = manifest_outputs(&manifest);
    assert_eq!(outputs.len(), 2);
    for (path, digest) in outputs {
        assert_eq!(digest, sha256_hex(&dir.path().join(&path)), "digest of {path}");
    }
}

#[test]
fn missing_required_flag_exits_2_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        dir.path(),
        &["rope-report", "--head-dim", "128", "--train-ctx", "64", "--target-ctx", "64", "--mode", "vanilla"],
    );
    assert_eq!(code(&out), 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("--base"), "stderr: {stderr}");
}

#[test]
fn unknown_mode_exits_2_and_still_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        dir.path(),
        &[
            "rope-report",
            "--base",
            "10000",
            "--head-dim",
            "8",
            "--train-ctx",
            "64",
            "--target-ctx",
            "64",
            "--mode",
            "sideways",
        ],
    );
    assert_eq!(code(&out), 2);
    let manifest = read_json(&dir.path().join("rope-report.manifest.json"));
    assert!(manifest["error"].as_str().unwrap().contains("sideways"));
}

#[test]
fn pack_train_eval_smoke_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.bin");
    write_smoke_corpus(&corpus);

    let out = run(
        dir.path(),
        &["pack", "--data", "corpus.bin", "--target-len", "64", "--strategy", "adaptive"],
    );
    assert_ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("sequences of 64"), "stdout: {stdout}");
    assert!(dir.path().join("packed.bin").exists());
    assert!(dir.path().join("packed.bin.json").exists());
    let manifest = read_json(&dir.path().join("pack.manifest.json"));
    assert_eq!(manifest["config"]["strategy"], "adaptive");
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 2); // data + sidecar

    let out = run(
        dir.path(),
        &[
            "train",
            "--data",
            "packed.bin",
            "--d-model",
            "32",
            "--n-layers",
            "1",
            "--n-heads",
            "2",
            "--context",
            "64",
            "--total-iters",
            "5",
            "--decay-iters",
            "4",
            "--batch-tokens",
            "128",
            "--seed",
            "3",
        ],
    );
    assert_ok(&out);
    let log = fs::read_to_string(dir.path().join("train-log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 5);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["step"], 0);
    let manifest = read_json(&dir.path().join("train.manifest.json"));
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["config"]["model"]["d_model"], 32);
    assert_eq!(manifest["config"]["train"]["total_iters"], 5);

    let ckpt = load_checkpoint(&dir.path().join("model.ckpt")).unwrap();
    assert_eq!(ckpt.step, 5);
    assert_eq!(ckpt.seed, 3);
    assert!(ckpt.optim.is_some());

    let out = run(
        dir.path(),
        &[
            "eval-ppl",
            "--checkpoint",
            "model.ckpt",
            "--data",
            "corpus.bin",
            "--lengths",
            "16,32,64",
            "--draws",
            "2",
        ],
    );
    assert_ok(&out);
    let csv = fs::read_to_string(dir.path().join("ppl.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "length,ppl");
    assert_eq!(lines.len(), 4);
    for line in &lines[1..] {
        let ppl: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!(ppl.is_finite() && ppl >= 1.0);
    }

    // Re-running the evaluation reproduces the artifacts byte for byte.
    let before_csv = fs::read(dir.path().join("ppl.csv")).unwrap();
    let before_json = fs::read(dir.path().join("ppl.json")).unwrap();
    let out = run(
        dir.path(),
        &[
            "eval-ppl",
            "--checkpoint",
            "model.ckpt",
            "--data",
            "corpus.bin",
            "--lengths",
            "16,32,64",
            "--draws",
            "2",
        ],
    );
    assert_ok(&out);
    assert_eq!(before_csv, fs::read(dir.path().join("ppl.csv")).unwrap());
    assert_eq!(before_json, fs::read(dir.path().join("ppl.json")).unwrap());

    // Retrieval probe at a length beyond the model's context: the rotary
    // table extrapolates, accuracy is whatever it is, artifacts are written.
    let out = run(
        dir.path(),
        &[
            "eval-niah",
            "--checkpoint",
            "model.ckpt",
            "--lengths",
            "192",
            "--depths",
            "0.0,1.0",
            "--trials",
            "1",
            "--steps",
            "1",
        ],
    );
    assert_ok(&out);
    let csv = fs::read_to_string(dir.path().join("niah.csv")).unwrap();
    assert!(csv.starts_with("length,0,1\n192,"), "csv: {csv}");
}

#[test]
fn cli_resume_matches_one_shot_run() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.bin");
    write_smoke_corpus(&corpus);
    assert_ok(&run(
        dir.path(),
        &["pack", "--data", "corpus.bin", "--target-len", "64", "--strategy", "eod", "--out-dir", "packed"],
    ));

    // Shared schedule and batch flags; fresh runs add the model shape, the
    // resumed run takes its shape (and seed) from the checkpoint.
    let shared = |total: &'static str, out: &'static str| {
        vec![
            "train", "--data", "packed/packed.bin", "--decay-iters", "5", "--batch-tokens",
            "128", "--peak-lr", "1e-3", "--min-lr", "1e-4", "--total-iters", total, "--out-dir",
            out,
        ]
    };
    let shape = [
        "--d-model", "32", "--n-layers", "1", "--n-heads", "2", "--context", "64", "--seed", "11",
    ];

    let mut args = shared("6", "oneshot");
    args.extend(shape);
    assert_ok(&run(dir.path(), &args));

    let mut args = shared("3", "leg1");
    args.extend(shape);
    assert_ok(&run(dir.path(), &args));

    let mut args = shared("6", "leg2");
    args.extend(["--resume", "leg1/model.ckpt"]);
    assert_ok(&run(dir.path(), &args));

    let oneshot = fs::read(dir.path().join("oneshot/model.ckpt")).unwrap();
    let resumed = fs::read(dir.path().join("leg2/model.ckpt")).unwrap();
    assert_eq!(oneshot, resumed, "resumed checkpoint must be bit-identical");
}

#[test]
fn config_file_feeds_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    write_smoke_corpus(&dir.path().join("corpus.bin"));
    assert_ok(&run(
        dir.path(),
        &["pack", "--data", "corpus.bin", "--target-len", "32", "--strategy", "adaptive"],
    ));
    fs::write(
        dir.path().join("run.json"),
        serde_json::json!({
            "model": {
                "d_model": 32,
                "n_layers": 1,
                "n_heads": 2,
                "head_dim": 16,
                "max_positions": 32,
                "rope": {
                    "base": 9000.0,
                    "head_dim": 16,
                    "train_context": 32,
                    "target_context": 32,
                    "mode": "vanilla"
                }
            },
            "train": {"peak_lr": 0.01, "min_lr": 0.001, "total_iters": 3, "decay_iters": 2, "batch_tokens": 64}
        })
        .to_string(),
    )
    .unwrap();

    let out = run(
        dir.path(),
        &["train", "--data", "packed.bin", "--config", "run.json", "--peak-lr", "0.02"],
    );
    assert_ok(&out);
    let manifest = read_json(&dir.path().join("train.manifest.json"));
    assert_eq!(manifest["config"]["train"]["peak_lr"], 0.02); // flag wins
    assert_eq!(manifest["config"]["train"]["total_iters"], 3); // file wins over default
    assert_eq!(manifest["config"]["model"]["d_model"], 32);
    assert_eq!(manifest["config"]["model"]["rope"]["base"], 9000.0);
}

#[test]
fn extend_rewrites_rope_and_rejects_shrinking() {
    let dir = tempfile::tempdir().unwrap();
    write_smoke_corpus(&dir.path().join("corpus.bin"));
    assert_ok(&run(
        dir.path(),
        &["pack", "--data", "corpus.bin", "--target-len", "64", "--strategy", "adaptive"],
    ));
    assert_ok(&run(
        dir.path(),
        &[
            "train", "--data", "packed.bin", "--d-model", "16", "--n-layers", "1", "--n-heads",
            "2", "--context", "64", "--total-iters", "2", "--decay-iters", "2", "--batch-tokens",
            "64",
        ],
    ));

    let out = run(
        dir.path(),
        &["extend", "--checkpoint", "model.ckpt", "--target-ctx", "256", "--mode", "diffusion"],
    );
    assert_ok(&out);
    let extended = load_checkpoint(&dir.path().join("extended.ckpt")).unwrap();
    assert_eq!(extended.config.rope.target_context, 256);
    assert_eq!(extended.config.rope.mode, NtkMode::Diffusion);
    assert_eq!(extended.config.max_positions, 256);
    let original = load_checkpoint(&dir.path().join("model.ckpt")).unwrap();
    assert_eq!(original.params, extended.params, "weights are copied verbatim");

    let out = run(
        dir.path(),
        &["extend", "--checkpoint", "model.ckpt", "--target-ctx", "32", "--mode", "diffusion", "--out-dir", "shrunk"],
    );
    assert_eq!(code(&out), 2);
    assert!(!dir.path().join("shrunk/extended.ckpt").exists());
    let manifest = read_json(&dir.path().join("shrunk/extend.manifest.json"));
    assert!(manifest["error"].as_str().unwrap().contains("below the trained context"));
}

#[test]
fn diverging_training_exits_4_with_manifest_marker() {
    let dir = tempfile::tempdir().unwrap();
    write_smoke_corpus(&dir.path().join("corpus.bin"));
    assert_ok(&run(
        dir.path(),
        &["pack", "--data", "corpus.bin", "--target-len", "64", "--strategy", "adaptive"],
    ));
    let out = run(
        dir.path(),
        &[
            "train", "--data", "packed.bin", "--d-model", "32", "--n-layers", "1", "--n-heads",
            "2", "--context", "64", "--total-iters", "8", "--decay-iters", "8", "--batch-tokens",
            "128", "--peak-lr", "1e18", "--min-lr", "1e10", "--warmup-frac", "0.1",
        ],
    );
    assert_eq!(code(&out), 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
    let manifest = read_json(&dir.path().join("train.manifest.json"));
    assert!(manifest["error"].as_str().unwrap().contains("non-finite"));
    assert!(!dir.path().join("model.ckpt").exists(), "no checkpoint from an aborted run");
    // The partial log is an output and carries the failure marker next to it.
    let listed: Vec<String> = manifest_outputs(&manifest).into_iter().map(|(p, _)| p).collect();
    assert!(listed.iter().any(|p| p.contains("train-log.jsonl")), "outputs: {listed:?}");
}

#[test]
fn missing_input_file_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        dir.path(),
        &["eval-ppl", "--checkpoint", "nope.ckpt", "--data", "nope.bin", "--lengths", "16"],
    );
    assert_eq!(code(&out), 3);
}

#[test]
fn help_lists_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["--help"]);
    assert_ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    for sub in ["rope-report", "pack", "train", "extend", "eval-ppl", "eval-niah"] {
        assert!(stdout.contains(sub), "missing {sub} in help");
    }
}

#[allow(dead_code)]
fn touch(path: &PathBuf) {
    fs::write(path, b"").unwrap();
}
