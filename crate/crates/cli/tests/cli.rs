use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use risgat::harness::{ExperimentConfig, CSV_HEADER};

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let mut cfg = ExperimentConfig::default();
    cfg.dataset.n_elements = 4;
    cfg.dataset.m_pilots = 8;
    cfg.dataset.snr_grid_db = vec![-10.0, 0.0];
    cfg.dataset.samples_per_snr = 20;
    cfg.training.epochs = 2;
    cfg.training.batch_size = 8;
    cfg.evaluation.n_elements = vec![4];
    cfg.evaluation.m_pilots = vec![8];
    cfg.evaluation.snr_db = vec![0.0, 10.0];
    cfg.evaluation.k_factors = vec![4.0, 10.0];
    cfg.evaluation.epsilons = vec![0.0, 0.1];
    cfg.evaluation.samples_per_point = 5;
    let path = dir.join("tiny.toml");
    fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path
}

fn risgat(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_risgat"))
        .args(args)
        .env_remove("RISGAT_SEED")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "risgat {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_pipeline_through_the_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = tiny_config(root);
    let (data, run, eval, base, merged) = (
        root.join("data"),
        root.join("run"),
        root.join("eval"),
        root.join("base"),
        root.join("merged"),
    );

    risgat(&["-c", s(&cfg), "generate", "--out", s(&data)]);
    assert!(data.join("manifest.json").exists() && data.join("samples.bin").exists());

    let out = risgat(&["-c", s(&cfg), "train", "--data", s(&data), "--out", s(&run)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("restored epoch"));
    assert!(run.join("checkpoint").join("checkpoint.json").exists());
    assert!(run.join("training_log.json").exists());

    risgat(&["-c", s(&cfg), "evaluate", "--checkpoint", s(&run.join("checkpoint")), "--figure", "5", "--out", s(&eval)]);
    let csv = fs::read_to_string(eval.join("nmse.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some(CSV_HEADER));
    assert_eq!(csv.lines().count(), 1 + 2 * 2 * 2);

    risgat(&["-c", s(&cfg), "baseline", "--figure", "3", "--out", s(&base)]);
    risgat(&[
        "-c",
        s(&cfg),
        "report",
        "--records",
        s(&eval.join("nmse.csv")),
        "--records",
        s(&base.join("nmse.csv")),
        "--out",
        s(&merged),
    ]);
    let merged_csv = fs::read_to_string(merged.join("nmse.csv")).unwrap();
    assert_eq!(merged_csv.lines().count(), 1 + 8 + 4);
    assert!(merged.join("summary.json").exists());
}

#[test]
fn reproduce_prints_records_and_honours_the_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let a = risgat(&["-c", s(&cfg), "--seed", "5", "reproduce-fig", "3", "--out", s(&tmp.path().join("a"))]);
    let b = risgat(&["-c", s(&cfg), "--seed", "5", "reproduce-fig", "3", "--out", s(&tmp.path().join("b"))]);
    let c = risgat(&["-c", s(&cfg), "--seed", "6", "reproduce-fig", "3", "--out", s(&tmp.path().join("c"))]);
    assert_eq!(a.stdout, b.stdout);
    assert_ne!(a.stdout, c.stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    assert_eq!(text.lines().next(), Some(CSV_HEADER));
    let resolved = ExperimentConfig::load(&tmp.path().join("a").join("config.toml")).unwrap();
    assert_eq!(resolved.seed, 5);
    assert!(tmp.path().join("a").join("model_n4_m8").join("checkpoint").exists());
}

#[test]
fn bad_arguments_fail_cleanly() {
    let run = |args: &[&str]| {
        Command::new(env!("CARGO_BIN_EXE_risgat"))
            .args(args)
            .env_remove("RISGAT_SEED")
            .output()
            .unwrap()
    };
    assert!(!run(&["reproduce-fig", "9"]).status.success());
    let missing = run(&["-c", "/nonexistent/config.toml", "generate", "--out", "/tmp/x"]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("config.toml"));
    let bad_seed = Command::new(env!("CARGO_BIN_EXE_risgat"))
        .args(["baseline", "--out", "/tmp/x"])
        .env("RISGAT_SEED", "abc")
        .output()
        .unwrap();
    assert!(!bad_seed.status.success());
}
