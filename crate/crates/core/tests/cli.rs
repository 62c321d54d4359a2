use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use desc_calib::baselines::{Baseline, PlattParams};
use desc_calib::checkpoint::{Calibrator, Checkpoint, CalibratorRecord};
use desc_calib::data::{load_csv, Role};
use desc_calib::metrics::MetricsReport;

const SMALL: &[&str] = &[
    "--set",
    "gen.sample_count=6000",
    "--set",
    "desc.epochs=2",
    "--set",
    "desc.batch_size=512",
    "--set",
    "desc.embedding_dim=4",
    "--set",
    "desc.alloc_mlp_hidden=8",
    "--set",
    "desc.value_mlp1_hidden=8",
];

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_desc-calib"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(cmd: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--out", out.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    let o = cli(&args);
    assert!(
        o.status.success(),
        "{cmd} failed: {}\n{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn rows(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count() - 1
}

#[test]
fn gen_writes_splits_and_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let o = run_ok("gen", a.path(), &[]);
    run_ok("gen", b.path(), &[]);
    let total: usize = ["train", "validation", "test"]
        .iter()
        .map(|s| rows(&a.path().join(format!("{s}.csv"))))
        .sum();
    assert_eq!(total, 6000);
    for f in ["train.csv", "validation.csv", "test.csv", "metadata.json", "gen.config.json"] {
        assert!(a.path().join(f).exists(), "{f}");
    }
    for f in ["train.csv", "test.csv", "metadata.json", "oracle_report.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("true probabilities"), "{stdout}");
}

#[test]
fn gen_rejects_unknown_distortion_field() {
    let d = tempfile::tempdir().unwrap();
    let o = cli(&[
        "gen",
        "--out",
        d.path().to_str().unwrap(),
        "--set",
        r#"distortion.assignments.0.field="nope""#,
    ]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope"));
}

#[test]
fn train_eval_pipeline_for_every_method() {
    let d = tempfile::tempdir().unwrap();
    run_ok("gen", d.path(), &[]);
    for method in ["desc", "hb", "ir", "platt", "temp", "sir"] {
        let out = d.path().join(method);
        fs::create_dir_all(&out).unwrap();
        let data = [
            format!("data.validation={}", d.path().join("validation.csv").display()),
            format!("data.test={}", d.path().join("test.csv").display()),
        ];
        let extra = ["--method", method, "--set", &data[0], "--set", &data[1]];
        run_ok("train", &out, &extra);
        let ck = Checkpoint::load(out.join("checkpoint.json")).unwrap();
        assert_eq!(ck.calibrator().unwrap().method(), method);
        let o = run_ok("eval", &out, &extra);
        assert!(String::from_utf8_lossy(&o.stdout).contains("MF-ECE@10"));
        let report: MetricsReport = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
        assert_eq!(report.n_samples, rows(&d.path().join("test.csv")));
        let rel = fs::read_to_string(out.join("reliability.csv")).unwrap();
        assert!(rel.starts_with("m,bin,count,"));
        if method == "desc" {
            assert_eq!(rows(&out.join("loss_trace.csv")), 3);
        }
        if method == "hb" {
            assert!(matches!(ck.calibrator, CalibratorRecord::Histogram(_)));
        }
    }
}

#[test]
fn zero_epoch_checkpoint_and_repeatable_eval() {
    let d = tempfile::tempdir().unwrap();
    run_ok("gen", d.path(), &[]);
    run_ok("train", d.path(), &["--set", "desc.epochs=0"]);
    let first = fs::read(d.path().join("checkpoint.json")).unwrap();
    run_ok("eval", d.path(), &[]);
    let m1 = fs::read(d.path().join("metrics.json")).unwrap();
    run_ok("eval", d.path(), &[]);
    assert_eq!(m1, fs::read(d.path().join("metrics.json")).unwrap());

    // Rerunning from the resolved config reproduces the checkpoint exactly.
    let again = tempfile::tempdir().unwrap();
    let cfg = d.path().join("train.config.json");
    let o = cli(&["train", "--out", again.path().to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--set", &format!("checkpoint={}", again.path().join("checkpoint.json").display())]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(first, fs::read(again.path().join("checkpoint.json")).unwrap());
}

#[test]
fn identity_calibrator_on_undistorted_data_is_unbiased() {
    let d = tempfile::tempdir().unwrap();
    run_ok("gen", d.path(), &["--set", "distortion.assignments=[]", "--set", "gen.sample_count=60000"]);
    let test = load_csv(d.path().join("test.csv"), Role::Test, None).unwrap();
    let ck = Checkpoint::new(&Calibrator::Baseline(Baseline::Platt(PlattParams::IDENTITY)), &test.schema);
    ck.save(d.path().join("checkpoint.json")).unwrap();
    run_ok("eval", d.path(), &[]);
    let report: MetricsReport = serde_json::from_str(&fs::read_to_string(d.path().join("metrics.json")).unwrap()).unwrap();
    // PCOC = Σp / Σy; with y ~ Bernoulli(p), Var(Σy) = Σ p(1-p).
    let p = test.p_uncalib();
    let sum_p: f64 = p.iter().sum();
    let sd = p.iter().map(|q| q * (1.0 - q)).sum::<f64>().sqrt();
    let positives = test.positives() as f64;
    assert!((positives - sum_p).abs() < 3.0 * sd);
    let pcoc = report.pcoc.unwrap();
    assert!((pcoc - 1.0).abs() < 3.0 * sd / (sum_p - 3.0 * sd), "{pcoc}");
}

#[test]
fn eval_errors_name_missing_fields_and_schema_mismatch() {
    let d = tempfile::tempdir().unwrap();
    run_ok("gen", d.path(), &[]);
    run_ok("train", d.path(), &["--method", "platt"]);
    let o = cli(&["eval", "--out", d.path().to_str().unwrap(), "--set", r#"metrics.fields=["z0","zz"]"#]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("zz"));

    let other = tempfile::tempdir().unwrap();
    run_ok("gen", other.path(), &["--set", "gen.cardinalities=[3,3]", "--set", "distortion.assignments=[]"]);
    let o = cli(&[
        "eval",
        "--out",
        d.path().to_str().unwrap(),
        "--set",
        &format!("data.test={}", other.path().join("test.csv").display()),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("z2"));
}

#[test]
fn missing_input_is_a_runtime_error() {
    let d = tempfile::tempdir().unwrap();
    let o = cli(&["train", "--out", d.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = cli(&["eval", "--out", d.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_with_one() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().to_str().unwrap();
    assert_eq!(cli(&["bogus"]).status.code(), Some(1));
    assert_eq!(cli(&["train", "--out", out, "--method", "xgboost"]).status.code(), Some(1));
    assert_eq!(cli(&["gen", "--out", out, "--set", "gen.nothing=3"]).status.code(), Some(1));
    assert_eq!(cli(&["gen", "--out", out, "--set", "desc.batch_size=0"]).status.code(), Some(1));
    assert_eq!(cli(&["gen"]).status.code(), Some(1));
}

#[test]
fn gradcheck_passes_and_negative_control_fails() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().to_str().unwrap();
    let o = cli(&["gradcheck", "--out", out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.path().join("gradcheck.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    assert!(report["worst_param"].as_str().is_some_and(|s| !s.is_empty()));

    let o = cli(&["gradcheck", "--out", out, "--set", "gradcheck.corrupt_backward=true"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAILED"));
}

#[test]
fn ablate_reports_six_rows_with_reference() {
    let d = tempfile::tempdir().unwrap();
    run_ok("gen", d.path(), &[]);
    run_ok("ablate", d.path(), &[]);
    let csv = fs::read_to_string(d.path().join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(lines.len(), 6);
    assert!(lines[0].starts_with("full,DESC,true"));
    assert!(lines.iter().skip(1).all(|l| l.contains(",false,")));
    assert!(csv.contains("w/o Shape Calibrator"));
}
