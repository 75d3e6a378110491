use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dcr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcr"))
        .args(args)
        .output()
        .expect("failed to launch dcr")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small generated dataset so the end-to-end runs stay fast.
fn generate(dir: &Path, seed: &str) {
    let out = dcr(&[
        "gen",
        "--out",
        path(dir),
        "--seed",
        seed,
        "--num-classes",
        "10",
        "--samples-max",
        "200",
        "--dim",
        "8",
        "--test-per-class",
        "20",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn train_args<'a>(train: &'a str, out: &'a str) -> Vec<&'a str> {
    vec![
        "train",
        "--train",
        train,
        "--out",
        out,
        "--seed",
        "3",
        "--epochs",
        "3",
        "--batch-uniform",
        "64",
        "--batch-balanced",
        "16",
    ]
}

#[test]
fn no_arguments_prints_usage_and_exits_one() {
    let out = dcr(&[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn unknown_subcommand_and_missing_flag_are_usage_errors() {
    assert_eq!(dcr(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(dcr(&["train"]).status.code(), Some(1));
    assert_eq!(dcr(&["help"]).status.code(), Some(0));
}

#[test]
fn gradcheck_passes_on_default_config() {
    let out = dcr(&["gradcheck", "--trials", "10"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
}

#[test]
fn gradcheck_reports_failure_with_exit_two() {
    // A step this coarse cannot resolve the curvature of the loss.
    let out = dcr(&["gradcheck", "--trials", "2", "--step", "0.5"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn oracle_check_passes() {
    let out = dcr(&["oracle-check", "--trials", "5", "--samples", "20000"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn invalid_values_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), "1");
    let train = dir.path().join("train.dcrf");
    let out = dcr(&[
        "train",
        "--train",
        path(&train),
        "--out",
        path(dir.path()),
        "--phi",
        "1.5",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("phi"));
    let out = dcr(&["stats", "--train", path(&dir.path().join("missing.dcrf"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_then_eval_writes_finite_report() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), "2");
    let train = dir.path().join("train.dcrf");
    let run = dir.path().join("run");
    let out = dcr(&train_args(path(&train), path(&run)));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("model.dcrm").exists());
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("train_report.json")).unwrap()).unwrap();
    assert_eq!(report["epochs"].as_array().unwrap().len(), 3);

    let eval_dir = dir.path().join("eval");
    let out = dcr(&[
        "eval",
        "--model",
        path(&run.join("model.dcrm")),
        "--test",
        path(&dir.path().join("test.dcrf")),
        "--out",
        path(&eval_dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval_dir.join("eval_report.json")).unwrap()).unwrap();
    let overall = report["overall"].as_f64().unwrap();
    assert!(overall.is_finite() && (0.0..=1.0).contains(&overall));
    let csv = fs::read_to_string(eval_dir.join("per_class.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);

    let out = dcr(&[
        "diagnose",
        "--train",
        path(&train),
        "--test",
        path(&dir.path().join("test.dcrf")),
        "--out",
        path(&dir.path().join("diag")),
        "--compensated",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let drift = fs::read_to_string(dir.path().join("diag/drift.csv")).unwrap();
    assert!(drift.starts_with("class,kind,"));

    let out = dcr(&["stats", "--train", path(&train)]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("# classes=10"));
}

#[test]
fn identical_invocations_produce_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    generate(&a, "5");
    generate(&b, "5");
    for name in ["train.dcrf", "test.dcrf"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap());
    }
    let train = a.join("train.dcrf");
    for (run, threads) in [(a.join("run"), "1"), (b.join("run"), "2")] {
        let mut args = train_args(path(&train), path(&run));
        args.extend(["--threads", threads]);
        let out = dcr(&args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for name in ["model.dcrm", "train_report.json"] {
        assert_eq!(
            fs::read(a.join("run").join(name)).unwrap(),
            fs::read(b.join("run").join(name)).unwrap(),
            "{name} differs"
        );
    }
}

#[test]
fn config_file_is_read_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), "6");
    let cfg = dir.path().join("train.cfg");
    fs::write(
        &cfg,
        "# short run\nepochs = 2\nbatch_uniform = 64\nbatch_balanced = 16\nphi = 0.5\n",
    )
    .unwrap();
    let run = dir.path().join("run");
    let out = dcr(&[
        "train",
        "--train",
        path(&dir.path().join("train.dcrf")),
        "--out",
        path(&run),
        "--config",
        path(&cfg),
        "--epochs",
        "1",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("train_report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["epochs"], 1);
    assert_eq!(report["config"]["phi"], 0.5);
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "epochz = 2\n").unwrap();
    let out = dcr(&[
        "stats",
        "--train",
        path(&dir.path().join("train.dcrf")),
        "--config",
        path(&bad),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn baseline_training_produces_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), "8");
    let train = dir.path().join("train.dcrf");
    let run = dir.path().join("base");
    let mut args = train_args(path(&train), path(&run));
    args.push("--baseline");
    let out = dcr(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("model.dcrm").exists());
}
