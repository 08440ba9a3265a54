use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_classaware"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small dataset that keeps every command fast.
fn small_dataset(dir: &Path) {
    let out = run(&[
        "gen", "--out", path(dir), "--height", "16", "--width", "20", "--n-labelled", "5", "--n-unlabelled", "10",
        "--n-test", "2", "--seed", "3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn write_config(dir: &Path, json: &str) -> String {
    let p = dir.join("config.json");
    fs::write(&p, json).unwrap();
    path(&p).to_string()
}

const FAST: &str = r#"{"iterations": 4, "features": 4, "eval_period": 2, "trace_period": 1, "sgd": {"lr": 0.01}}"#;

#[test]
fn gen_writes_meta_and_image_files() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data);
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(data.join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["h"], 16);
    assert_eq!(meta["w"], 20);
    assert_eq!(meta["classes"], 4);
    assert_eq!(meta["seed"], 3);
    assert_eq!(meta["files"].as_array().unwrap().len(), 17);
    let first = fs::read(data.join(meta["files"][0]["file"].as_str().unwrap())).unwrap();
    assert_eq!(&first[..4], b"SEGD");
    assert_eq!(first.len(), 16 + 5 * 16 * 20);
}

#[test]
fn gen_rejects_infeasible_geometry() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["gen", "--out", path(&tmp.path().join("d")), "--height", "8", "--width", "8"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_writes_all_outputs_and_eval_reads_the_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data);
    let cfg = write_config(tmp.path(), FAST);
    let out_dir = tmp.path().join("run");
    let out = run(&["train", "--config", &cfg, "--data", path(&data), "--out", path(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["report.json", "metrics.csv", "cc_trace.csv", "rate_trace.csv", "loss_curve.csv", "student.ckpt", "teacher.ckpt"] {
        assert!(out_dir.join(f).exists(), "missing {f}");
    }
    let trace = fs::read_to_string(out_dir.join("cc_trace.csv")).unwrap();
    assert!(trace.starts_with("iteration,class,E,V,Con,CC\n"));
    let metrics = fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("class,dsc,asd,hd,sensitivity\n"));
    assert!(metrics.lines().last().unwrap().starts_with("macro,"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["loss_curve"].as_array().unwrap().len(), 4);
    assert_eq!(report["config_hash"].as_str().unwrap().len(), 64);
    let ckpt = fs::read(out_dir.join("teacher.ckpt")).unwrap();
    assert_eq!(&ckpt[..4], b"TGCK");

    let json = tmp.path().join("eval.json");
    let ev = run(&["eval", "--checkpoint", path(&out_dir.join("teacher.ckpt")), "--data", path(&data), "--json", path(&json)]);
    assert!(ev.status.success(), "{}", String::from_utf8_lossy(&ev.stderr));
    let stdout = String::from_utf8(ev.stdout).unwrap();
    assert!(stdout.starts_with("class,dsc,asd,hd,sensitivity\n"));
    // the test split is what train scored at the end, so the numbers agree
    let evaluated: serde_json::Value = serde_json::from_str(&fs::read_to_string(json).unwrap()).unwrap();
    assert_eq!(evaluated, report["test"]);
}

#[test]
fn identical_runs_write_identical_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data);
    let cfg = write_config(tmp.path(), FAST);
    let mut reports = Vec::new();
    for name in ["a", "b"] {
        let dir = tmp.path().join(name);
        assert!(run(&["train", "--config", &cfg, "--data", path(&data), "--out", path(&dir)]).status.success());
        reports.push(fs::read(dir.join("report.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn config_errors_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data);
    let out_dir = tmp.path().join("run");
    let unknown = write_config(tmp.path(), r#"{"iterations": 4, "learning_rate": 0.1}"#);
    let out = run(&["train", "--config", &unknown, "--data", path(&data), "--out", path(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
    let invalid = write_config(tmp.path(), r#"{"iterations": 0}"#);
    let out = run(&["train", "--config", &invalid, "--data", path(&data), "--out", path(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
    let missing = run(&["train", "--config", "/nonexistent/cfg.json", "--data", path(&data), "--out", path(&out_dir)]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn divergence_exits_with_3() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data);
    let cfg = write_config(tmp.path(), r#"{"iterations": 50, "features": 4, "sgd": {"lr": 1e6}}"#);
    let out = run(&["train", "--config", &cfg, "--data", path(&data), "--out", path(&tmp.path().join("run"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
}

#[test]
fn ablate_writes_the_fixed_header() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data);
    let cfg = write_config(tmp.path(), r#"{"iterations": 2, "features": 4, "eval_period": 2}"#);
    let out = run(&["ablate", "--config", &cfg, "--data", path(&data), "--seeds", "1,2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = String::from_utf8(out.stdout).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("config,seed,class,dsc,asd,hd"));
    for variant in ["base", "rcs_simple_avg", "rcs_fuzzy", "rcs_simple_avg_dts", "full"] {
        assert!(csv.contains(&format!("\n{variant},1,macro,")), "{variant}");
        assert!(csv.contains(&format!("\n{variant},mean,macro,")), "{variant}");
    }
}

#[test]
fn fuse_reproduces_the_three_class_example() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("ind.csv");
    // entropy and variance are lower-is-better, confidence higher-is-better,
    // so every indicator normalizes to (1, 0.5, 0)
    fs::write(&input, "class,E,V,Con\n0,-0.9,0.1,0.9\n1,-0.5,0.3,0.6\n2,-0.1,0.5,0.3\n").unwrap();
    let out = run(&["fuse", "--indicators", path(&input)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("class,ccf,fr,cc"));
    let cc: Vec<f64> = lines.map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    let expected = [0.799758, 0.256535, 0.0];
    for (a, b) in cc.iter().zip(expected) {
        assert!((a - b).abs() < 1e-6, "{cc:?}");
    }
}

#[test]
fn fuse_handles_absent_classes_and_bad_input() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("ind.csv");
    fs::write(&input, "class,E,V,Con\n0,-0.9,0.1,0.9\n1,,,\n2,-0.1,0.5,0.3\n").unwrap();
    let out = run(&["fuse", "--indicators", path(&input)]);
    assert!(out.status.success());
    assert!(String::from_utf8(out.stdout).unwrap().contains("\n1,,,\n"));
    fs::write(&input, "class,entropy\n0,1\n").unwrap();
    assert_eq!(run(&["fuse", "--indicators", path(&input)]).status.code(), Some(2));
}
