use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn levt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_levt"))
        .args(args)
        .env_remove("LEVT_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, extra: &[&str]) {
    let mut args = vec![
        "gen-synth",
        "--task",
        "copy",
        "--train",
        "40",
        "--valid",
        "10",
        "--test",
        "10",
        "--min-len",
        "2",
        "--max-len",
        "5",
        "--seed",
        "3",
        "--out-dir",
        s(dir),
    ];
    args.extend_from_slice(extra);
    let o = levt(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

/// A 1-layer d=8 model trained for `steps` steps.
fn tiny_model(dir: &Path, steps: &str) -> std::path::PathBuf {
    let out = dir.join("run");
    let o = levt(&[
        "train",
        "--train",
        s(&dir.join("train")),
        "--valid",
        s(&dir.join("valid")),
        "--out-dir",
        s(&out),
        "--seed",
        "1",
        "--steps",
        steps,
        "--batch-size",
        "4",
        "--d-model",
        "8",
        "--layers",
        "1",
        "--eval-every",
        "0",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn gen_synth_is_deterministic_and_needs_a_seed() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    synth(a.path(), &["--refine"]);
    synth(b.path(), &["--refine"]);
    for f in ["train.src", "train.tgt", "train.init", "valid.tgt", "test.init"] {
        let x = fs::read(a.path().join(f)).unwrap();
        assert_eq!(x, fs::read(b.path().join(f)).unwrap(), "{f}");
        assert!(
            !String::from_utf8(x).unwrap().lines().any(str::is_empty),
            "{f} has an empty line"
        );
    }
    let o = levt(&["gen-synth", "--task", "copy", "--out-dir", s(&a.path().join("x"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn seed_can_come_from_the_environment() {
    let d = TempDir::new().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_levt"))
        .args([
            "gen-synth",
            "--task",
            "reverse",
            "--train",
            "3",
            "--valid",
            "1",
            "--test",
            "1",
            "--out-dir",
            s(d.path()),
        ])
        .env("LEVT_SEED", "5")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert_eq!(
        fs::read_to_string(d.path().join("train.src"))
            .unwrap()
            .lines()
            .count(),
        3
    );
}

#[test]
fn missing_corpus_is_a_usage_error_without_outputs() {
    let d = TempDir::new().unwrap();
    let out = d.path().join("out");
    let o = levt(&[
        "train",
        "--train",
        s(&d.path().join("nope")),
        "--out-dir",
        s(&out),
        "--seed",
        "1",
    ]);
    assert_eq!(code(&o), 2);
    assert!(!out.exists());
    let stderr = String::from_utf8_lossy(&o.stderr);
    let line = stderr.lines().last().unwrap();
    let v: serde_json::Value = serde_json::from_str(line).expect("json log line");
    assert_eq!(v["level"], "error");
}

#[test]
fn train_without_seed_is_rejected() {
    let d = TempDir::new().unwrap();
    synth(d.path(), &[]);
    let out = d.path().join("out");
    let o = levt(&[
        "train",
        "--train",
        s(&d.path().join("train")),
        "--out-dir",
        s(&out),
    ]);
    assert_eq!(code(&o), 2);
    assert!(!out.exists());
}

#[test]
fn zero_steps_writes_initial_checkpoint() {
    let d = TempDir::new().unwrap();
    synth(d.path(), &[]);
    let out = tiny_model(d.path(), "0");
    assert!(out.join("last.ckpt").is_file());
    assert!(out.join("config.toml").is_file());
    let log = fs::read_to_string(out.join("train.log")).unwrap();
    for line in log.lines() {
        serde_json::from_str::<serde_json::Value>(line).unwrap();
    }
    // The written config reproduces the run.
    let cfg = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(cfg.contains("steps = 0"));
    assert!(cfg.contains("seed = 1"));
}

#[test]
fn training_with_validation_keeps_best() {
    let d = TempDir::new().unwrap();
    synth(d.path(), &[]);
    let out = tiny_model(d.path(), "6");
    assert!(out.join("best.ckpt").is_file());
    let log = fs::read_to_string(out.join("train.log")).unwrap();
    assert!(log.lines().any(|l| l.contains("\"event\":\"eval\"")));
}

#[test]
fn decode_contracts() {
    let d = TempDir::new().unwrap();
    synth(d.path(), &[]);
    let out = tiny_model(d.path(), "0");
    let ckpt = out.join("last.ckpt");

    let empty = d.path().join("empty.txt");
    fs::write(&empty, "").unwrap();
    let hyp = d.path().join("hyp.txt");
    let o = levt(&[
        "decode",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&empty),
        "--output",
        s(&hyp),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(&hyp).unwrap(), "");

    let trace = d.path().join("trace.jsonl");
    let o = levt(&[
        "decode",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&d.path().join("test.src")),
        "--output",
        s(&hyp),
        "--trace",
        s(&trace),
        "--max-iter",
        "3",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(&hyp).unwrap().lines().count(), 10);
    assert!(fs::read_to_string(&trace).unwrap().lines().count() >= 10);

    let oov = d.path().join("oov.txt");
    fs::write(&oov, "zebra\n").unwrap();
    let o = levt(&[
        "decode",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&oov),
        "--output",
        s(&hyp),
    ]);
    assert_eq!(code(&o), 3);
    let o = levt(&[
        "decode",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&oov),
        "--output",
        s(&hyp),
        "--allow-unk",
    ]);
    assert_eq!(code(&o), 0);

    let o = levt(&[
        "decode",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&empty),
        "--output",
        s(&hyp),
        "--oracle-hints",
        "deletion",
    ]);
    assert_eq!(code(&o), 2);

    let junk = d.path().join("junk.ckpt");
    fs::write(&junk, "not a checkpoint").unwrap();
    let o = levt(&[
        "decode",
        "--checkpoint",
        s(&junk),
        "--input",
        s(&empty),
        "--output",
        s(&hyp),
    ]);
    assert_eq!(code(&o), 3);
}

#[test]
fn bench_prints_one_row_per_setting() {
    let d = TempDir::new().unwrap();
    synth(d.path(), &[]);
    let out = tiny_model(d.path(), "0");
    let o = levt(&[
        "bench",
        "--checkpoint",
        s(&out.join("last.ckpt")),
        "--input",
        s(&d.path().join("test.src")),
        "--ref",
        s(&d.path().join("test.tgt")),
        "--limit",
        "3",
        "--max-iter",
        "2",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    assert!(lines[0].starts_with("early_exit"));
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("1-1\t"));
}

#[test]
fn eval_scores_identical_files_perfectly() {
    let d = TempDir::new().unwrap();
    let a = d.path().join("a.txt");
    let b = d.path().join("b.txt");
    fs::write(&a, "the cat sat\non the mat\n").unwrap();
    let o = levt(&["eval", "--hyp", s(&a), "--ref", s(&a)]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["bleu"], 100.0);
    assert_eq!(v["exact_match"], 1.0);
    fs::write(&b, "the cat sat\n").unwrap();
    assert_eq!(code(&levt(&["eval", "--hyp", s(&a), "--ref", s(&b)])), 2);
}

#[test]
fn oracle_test_passes_and_detects_mutation() {
    let o = levt(&["oracle-test", "--max-len", "4", "--alphabet", "2"]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["passed"], true);
    assert_eq!(
        code(&levt(&[
            "oracle-test",
            "--max-len",
            "4",
            "--alphabet",
            "2",
            "--mutate"
        ])),
        1
    );
    assert_eq!(code(&levt(&["oracle-test", "--max-len", "9"])), 2);
}

#[test]
fn bad_flag_values_are_usage_errors() {
    assert_eq!(code(&levt(&["train", "--sharing", "sideways"])), 2);
    assert_eq!(code(&levt(&["nonsense"])), 2);
}
