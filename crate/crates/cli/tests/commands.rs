use std::path::Path;
use std::process::{Command, Output};

use scott_lab::report::Table;

const TINY: &str = "\
seed = 5
teacher.hidden = 8,8
teacher.iterations = 300
teacher.batch_size = 64
distill.iterations = 40
distill.batch_size = 64
distill.log_every = 10
sample.count = 300
sample.steps = 1,2
sample.seeds = 1,2
eval.reference = 300
bench.trajectories = 400
order.trajectories = 400
";

fn lab(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("tiny.cfg");
    if !cfg.exists() {
        std::fs::write(&cfg, TINY).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_scott-lab"))
        .args(args)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("run"))
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = lab(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr_record(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("an error record");
    serde_json::from_str(line).expect("stderr ends with a JSON record")
}

#[test]
fn the_full_recipe_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for c in ["train-teacher", "distill", "sample", "eval"] {
        ok(d, &[c]);
    }
    let run = d.join("run");
    for f in [
        "teacher.ckpt",
        "teacher_loss.csv",
        "student.ckpt",
        "distill_loss.csv",
        "eval.csv",
        "eval_summary.csv",
        "samples/student_k1_s1.csv",
        "samples/student_k2_s2.csv",
        "samples/student_k1_s1.svg",
        "eval.manifest",
        "eval.cfg",
    ] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let eval = Table::read(&run.join("eval.csv")).unwrap();
    assert_eq!(eval.rows.len(), 4);
    let summary = Table::read(&run.join("eval_summary.csv")).unwrap();
    assert_eq!(summary.rows.len(), 2);
    let seeds = summary.column("seeds").unwrap();
    assert!(summary.rows.iter().all(|r| r[seeds] == "2"));

    // The manifest's config file reproduces the run on its own.
    let manifest = std::fs::read_to_string(run.join("eval.manifest")).unwrap();
    assert!(manifest.contains("config_hash = "));
    assert!(manifest.contains("seed = 5"));
}

#[test]
fn sample_files_carry_their_step_counts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["train-teacher"]);
    ok(d, &["distill"]);
    ok(d, &["sample", "--set", "sample.seeds=3"]);
    for k in [1, 2] {
        let t = Table::read(&d.join(format!("run/samples/student_k{k}_s3.csv"))).unwrap();
        assert_eq!(t.rows.len(), 300);
        let steps = t.column("steps").unwrap();
        assert!(t.rows.iter().all(|r| r[steps] == k.to_string()));
    }
}

#[test]
fn runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        ok(d, &["train-teacher"]);
        ok(d, &["distill"]);
        ok(d, &["sample"]);
    }
    for f in [
        "teacher.ckpt",
        "student.ckpt",
        "distill_loss.csv",
        "samples/student_k2_s1.csv",
    ] {
        let x = std::fs::read(a.path().join("run").join(f)).unwrap();
        let y = std::fs::read(b.path().join("run").join(f)).unwrap();
        assert!(x == y, "{f} differs between identical runs");
    }
}

#[test]
fn distilling_against_another_teacher_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["train-teacher"]);
    let out = lab(d, &["distill", "--set", "teacher.iterations=301"]);
    assert_eq!(out.status.code(), Some(3));
    let rec = stderr_record(&out);
    assert_eq!(rec["command"], "distill");
    assert_eq!(rec["exit_code"], 3);
    assert!(!d.join("run/student.ckpt").exists());
}

#[test]
fn missing_inputs_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    for c in ["distill", "sample", "eval"] {
        let out = lab(dir.path(), &[c]);
        assert_eq!(out.status.code(), Some(3), "{c}");
        assert_eq!(stderr_record(&out)["error"], "dependency");
    }
}

#[test]
fn config_errors_exit_2_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let out = lab(dir.path(), &["train-teacher", "--set", "teacher.hiden=8"]);
    assert_eq!(out.status.code(), Some(2));
    let rec = stderr_record(&out);
    assert_eq!(rec["error"], "config");
    assert!(rec["message"].as_str().unwrap().contains("teacher.hiden"));

    let out = lab(dir.path(), &["fly"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn order_check_and_solver_bench_tables() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["order-check"]);
    ok(d, &["solver-bench"]);
    let order = Table::read(&d.join("run/order.csv")).unwrap();
    let fitted = order.column("fitted_order").unwrap();
    assert_eq!(order.rows.len(), 2 * 4);
    assert!(order.rows.iter().all(|r| r[fitted].parse::<f64>().unwrap().is_finite()));
    let bench = Table::read(&d.join("run/solver_bench.csv")).unwrap();
    assert_eq!(bench.rows.len(), 5);
    let w1 = bench.column("w1").unwrap();
    assert!(bench.rows.iter().all(|r| r[w1].parse::<f64>().unwrap() > 0.0));
}
