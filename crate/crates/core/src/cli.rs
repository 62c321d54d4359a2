//! Command-line driver: `gen`, `train`, `eval`, `ablate` and `gradcheck`.
//!
//! Settings come from built-in defaults, then `--config <json>`, then
//! `--seed`, then each `--set dotted.path=value` in order. Every command
//! writes the resolved settings to `<out>/<command>.config.json`, which can be
//! passed back through `--config` to repeat the run.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::baselines::{histogram, Baseline, BaselineKind, DEFAULT_HISTOGRAM_BINS};
use crate::benchmark::{ablation, BenchmarkConfig};
use crate::checkpoint::{Calibrator, Checkpoint};
use crate::data::{format_f64, load_csv, split_indices, BucketMode, Dataset, FieldSchema, Role};
use crate::desc::{fit, micro_gradcheck, DescConfig};
use crate::diffcore::GradCheckConfig;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, reliability_bins, MetricsConfig};
use crate::synthgen::{generate, oracle_report, write_dataset, DistortionSpec, GenConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "desc-calib", version, about = "Multi-field post-hoc calibration toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, clap::Args)]
struct Common {
    /// JSON settings file (usually a previously written *.config.json).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for generation, splitting, initialization and shuffling.
    #[arg(long)]
    seed: Option<u64>,
    /// Calibration method.
    #[arg(long)]
    method: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Override a setting, e.g. `--set desc.epochs=5`. Values are parsed as
    /// JSON, falling back to a plain string.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset split into train/validation/test CSVs.
    Gen(Common),
    /// Fit a calibrator on the validation split and write a checkpoint.
    Train(Common),
    /// Apply a checkpoint to the test split and write metrics.
    Eval(Common),
    /// Train full DESC and its five ablations and compare them.
    Ablate(Common),
    /// Check DESC gradients against finite differences.
    Gradcheck(Common),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    pub validation: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HistogramSettings {
    pub bins: usize,
    pub mode: BucketMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckSettings {
    pub tolerance: f64,
    pub step: f64,
    /// Negative control: scales weight gradients so the check must fail.
    pub corrupt_backward: bool,
}

/// Fully resolved settings of one command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub method: String,
    pub gen: GenConfig,
    pub distortion: DistortionSpec,
    pub split: [f64; 3],
    pub data: DataPaths,
    pub checkpoint: Option<PathBuf>,
    pub desc: DescConfig,
    pub histogram: HistogramSettings,
    pub metrics: MetricsConfig,
    pub gradcheck: GradcheckSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        let bench = BenchmarkConfig::default();
        RunConfig {
            seed: bench.gen.seed,
            method: "desc".into(),
            gen: bench.gen,
            distortion: bench.distortion,
            split: bench.split,
            data: DataPaths::default(),
            checkpoint: None,
            desc: bench.desc,
            histogram: HistogramSettings {
                bins: DEFAULT_HISTOGRAM_BINS,
                mode: BucketMode::Quantile,
            },
            metrics: bench.metrics,
            gradcheck: GradcheckSettings {
                tolerance: 1e-4,
                step: GradCheckConfig::default().step,
                corrupt_backward: false,
            },
        }
    }
}

impl Default for HistogramSettings {
    fn default() -> Self {
        RunConfig::default().histogram
    }
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        RunConfig::default().gradcheck
    }
}

/// Sets `path` (dot separated) inside `root` to `raw`, parsed as JSON when
/// possible. Only existing keys can be set.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::invalid(format!("--set expects KEY=VALUE, got `{assignment}`")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    let mut node = root;
    for (i, key) in keys.iter().enumerate() {
        let last = i + 1 == keys.len();
        node = match node {
            Value::Object(map) => {
                if !map.contains_key(*key) {
                    return Err(Error::invalid(format!("unknown setting `{path}`")));
                }
                map.get_mut(*key).expect("checked")
            }
            Value::Array(items) => {
                let idx: usize = key
                    .parse()
                    .map_err(|_| Error::invalid(format!("`{key}` in `{path}` is not an index")))?;
                let len = items.len();
                items
                    .get_mut(idx)
                    .ok_or_else(|| Error::invalid(format!("index {idx} out of range ({len}) in `{path}`")))?
            }
            _ => return Err(Error::invalid(format!("`{path}` descends into a scalar"))),
        };
        if last {
            *node = value;
            return Ok(());
        }
    }
    Err(Error::invalid("empty --set key"))
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut value = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let parsed: RunConfig = serde_json::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
            serde_json::to_value(parsed)?
        }
        None => serde_json::to_value(RunConfig::default())?,
    };
    if let Some(seed) = common.seed {
        apply_override(&mut value, &format!("seed={seed}"))?;
    }
    if let Some(m) = &common.method {
        value["method"] = Value::String(m.clone());
    }
    for s in &common.set {
        apply_override(&mut value, s)?;
    }
    let mut cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::invalid(e.to_string()))?;
    // One seed drives every random stream of the run.
    cfg.gen.seed = cfg.seed;
    cfg.desc.seed = cfg.seed;
    cfg.desc.validate()?;
    if cfg.method != "desc" {
        BaselineKind::parse(&cfg.method)?;
    }
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_text(path, &s)
}

fn data_path(explicit: &Option<PathBuf>, out: &Path, name: &str) -> PathBuf {
    explicit.clone().unwrap_or_else(|| out.join(format!("{name}.csv")))
}

fn cmd_gen(cfg: &mut RunConfig, out: &Path, log: &mut dyn Write) -> Result<()> {
    let generated = generate(&cfg.gen, &cfg.distortion)?;
    let [tr, va, te] = split_indices(generated.dataset.len(), cfg.split, cfg.seed)?;
    let train = generated.dataset.subset(&tr, Role::Train);
    let validation = generated.dataset.subset(&va, Role::Validation);
    let test = generated.dataset.subset(&te, Role::Test);
    let pick = |idx: &[usize]| -> Vec<f64> { idx.iter().map(|&i| generated.true_probs[i]).collect() };
    for (name, ds, idx) in [("train", &train, &tr), ("validation", &validation, &va), ("test", &test, &te)] {
        write_dataset(ds, &pick(idx), out.join(format!("{name}.csv")))?;
    }
    write_json(&out.join("metadata.json"), &generated.metadata)?;
    cfg.data = DataPaths {
        train: Some(out.join("train.csv")),
        validation: Some(out.join("validation.csv")),
        test: Some(out.join("test.csv")),
    };

    let oracle = oracle_report(&test, &pick(&te), &cfg.metrics)?;
    let uncal = evaluate(&test, &test.p_uncalib(), &cfg.metrics)?;
    write_json(&out.join("oracle_report.json"), &oracle)?;
    let _ = writeln!(
        log,
        "generated {} samples ({} / {} / {})",
        generated.dataset.len(),
        train.len(),
        validation.len(),
        test.len()
    );
    for (name, r) in [("true probabilities", &oracle), ("uncalibrated", &uncal)] {
        let _ = writeln!(
            log,
            "test {name}: MF-ECE@10 {:.5}  log-loss {:.5}  AUC {}",
            r.mf_ece_at(10).unwrap_or(f64::NAN),
            r.log_loss,
            r.auc.map_or("n/a".into(), |a| format!("{a:.5}"))
        );
    }
    Ok(())
}

fn load_split(cfg: &RunConfig, out: &Path, which: &str, schema: Option<&FieldSchema>) -> Result<Dataset> {
    let (explicit, role) = match which {
        "validation" => (&cfg.data.validation, Role::Validation),
        "test" => (&cfg.data.test, Role::Test),
        _ => (&cfg.data.train, Role::Train),
    };
    load_csv(data_path(explicit, out, which), role, schema)
}

fn fit_calibrator(cfg: &RunConfig, data: &Dataset) -> Result<(Calibrator, Option<crate::desc::TrainReport>)> {
    if cfg.method == "desc" {
        let (model, report) = fit(data, &cfg.desc)?;
        return Ok((Calibrator::Desc(Box::new(model)), Some(report)));
    }
    let kind = BaselineKind::parse(&cfg.method)?;
    let b = match kind {
        BaselineKind::Histogram => Baseline::Histogram(histogram(
            &data.p_uncalib(),
            &data.labels(),
            cfg.histogram.bins,
            cfg.histogram.mode,
        )?),
        other => Baseline::fit_dataset(other, data)?,
    };
    Ok((Calibrator::Baseline(b), None))
}

fn cmd_train(cfg: &mut RunConfig, out: &Path, log: &mut dyn Write) -> Result<()> {
    cfg.data.validation = Some(data_path(&cfg.data.validation, out, "validation"));
    let data = load_split(cfg, out, "validation", None)?;
    let (cal, report) = fit_calibrator(cfg, &data)?;
    let ck_path = cfg.checkpoint.clone().unwrap_or_else(|| out.join("checkpoint.json"));
    Checkpoint::new(&cal, &data.schema).save(&ck_path)?;
    cfg.checkpoint = Some(ck_path.clone());
    if let Some(r) = report {
        let mut csv = String::from("epoch,loss\n0,");
        csv.push_str(&format_f64(r.initial_loss));
        csv.push('\n');
        for (e, l) in r.epoch_losses.iter().enumerate() {
            csv.push_str(&format!("{},{}\n", e + 1, format_f64(*l)));
        }
        write_text(&out.join("loss_trace.csv"), &csv)?;
        write_json(&out.join("train_report.json"), &r)?;
        let _ = writeln!(
            log,
            "trained DESC for {} steps: loss {:.6} -> {:.6}",
            r.steps, r.initial_loss, r.final_loss
        );
    } else {
        let _ = writeln!(log, "fitted {} on {} samples", cal.method(), data.len());
    }
    let _ = writeln!(log, "checkpoint written to {}", ck_path.display());
    Ok(())
}

fn cmd_eval(cfg: &mut RunConfig, out: &Path, log: &mut dyn Write) -> Result<()> {
    let ck_path = cfg.checkpoint.clone().unwrap_or_else(|| out.join("checkpoint.json"));
    cfg.checkpoint = Some(ck_path.clone());
    cfg.data.test = Some(data_path(&cfg.data.test, out, "test"));
    let ck = Checkpoint::load(&ck_path)?;
    let cal = ck.calibrator()?;
    let test = load_split(cfg, out, "test", Some(&ck.schema))?;
    let p = cal.predict(&test)?;
    let report = evaluate(&test, &p, &cfg.metrics)?;
    write_json(&out.join("metrics.json"), &report)?;

    let labels = test.labels();
    let pu = test.p_uncalib();
    let mut csv = String::from("m,bin,count,p_uncalib_lo,p_uncalib_hi,confidence,accuracy\n");
    for &m in &cfg.metrics.m_values {
        for b in reliability_bins(&labels, &p, &pu, m, cfg.metrics.binning) {
            csv.push_str(&format!(
                "{m},{},{},{},{},{},{}\n",
                b.bin,
                b.count,
                format_f64(b.p_uncalib_lo),
                format_f64(b.p_uncalib_hi),
                format_f64(b.confidence),
                format_f64(b.accuracy)
            ));
        }
    }
    write_text(&out.join("reliability.csv"), &csv)?;
    let _ = writeln!(
        log,
        "{}: MF-ECE@10 {:.5}  MF-RCE {}  log-loss {:.5}  AUC {}  PCOC {}",
        cal.method(),
        report.mf_ece_at(10).unwrap_or(f64::NAN),
        report.mf_rce.map_or("n/a".into(), |v| format!("{v:.5}")),
        report.log_loss,
        report.auc.map_or("n/a".into(), |v| format!("{v:.5}")),
        report.pcoc.map_or("n/a".into(), |v| format!("{v:.5}")),
    );
    Ok(())
}

fn cmd_ablate(cfg: &mut RunConfig, out: &Path, log: &mut dyn Write) -> Result<()> {
    cfg.data.validation = Some(data_path(&cfg.data.validation, out, "validation"));
    cfg.data.test = Some(data_path(&cfg.data.test, out, "test"));
    let validation = load_split(cfg, out, "validation", None)?;
    let test = load_split(cfg, out, "test", Some(&validation.schema))?;
    let bench = BenchmarkConfig {
        desc: cfg.desc.clone(),
        metrics: cfg.metrics.clone(),
        ..BenchmarkConfig::default()
    };
    let rows = ablation(&bench, &validation, &test)?;
    write_json(&out.join("ablation.json"), &rows)?;
    let mut csv = String::from("variant,label,reference,mf_ece_3,mf_ece_10,mf_rce,log_loss,auc\n");
    for r in &rows {
        let opt = |v: Option<f64>| v.map(format_f64).unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.variant.key(),
            r.label,
            r.reference,
            opt(r.report.mf_ece_at(3)),
            opt(r.report.mf_ece_at(10)),
            opt(r.report.mf_rce),
            format_f64(r.report.log_loss),
            opt(r.report.auc)
        ));
        let _ = writeln!(
            log,
            "{:32} MF-ECE@10 {:.5}{}",
            r.label,
            r.report.mf_ece_at(10).unwrap_or(f64::NAN),
            if r.reference { "  (reference)" } else { "" }
        );
    }
    write_text(&out.join("ablation.csv"), &csv)?;
    Ok(())
}

fn cmd_gradcheck(cfg: &mut RunConfig, out: &Path, log: &mut dyn Write) -> Result<bool> {
    let check = GradCheckConfig {
        step: cfg.gradcheck.step,
        seed: cfg.seed,
        inject_fault: cfg.gradcheck.corrupt_backward,
        ..GradCheckConfig::default()
    };
    let report = micro_gradcheck(cfg.seed, cfg.gradcheck.tolerance, &check)?;
    write_json(&out.join("gradcheck.json"), &report)?;
    let _ = writeln!(
        log,
        "gradient check {}: max relative error {:.3e} (tolerance {:.0e}), worst parameter `{}`",
        if report.passed { "passed" } else { "FAILED" },
        report.max_rel_error,
        report.tolerance,
        report.worst_param
    );
    Ok(report.passed)
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) | Error::UnknownParam(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

/// Runs the CLI on `args` (including the program name) and returns the
/// process exit code. Output goes to `stdout`, diagnostics to `stderr`.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if e.use_stderr() {
                write!(stderr, "{e}")
            } else {
                write!(stdout, "{e}")
            };
            return code;
        }
    };
    let (name, common) = match &cli.command {
        Command::Gen(c) => ("gen", c),
        Command::Train(c) => ("train", c),
        Command::Eval(c) => ("eval", c),
        Command::Ablate(c) => ("ablate", c),
        Command::Gradcheck(c) => ("gradcheck", c),
    };
    let mut cfg = match resolve(common) {
        Ok(c) => c,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            return EXIT_USAGE;
        }
    };
    let out = common.out.as_path();
    if let Err(e) = fs::create_dir_all(out) {
        let _ = writeln!(stderr, "error: cannot create {}: {e}", out.display());
        return EXIT_RUNTIME;
    }
    let result = match &cli.command {
        Command::Gen(_) => cmd_gen(&mut cfg, out, stdout).map(|_| true),
        Command::Train(_) => cmd_train(&mut cfg, out, stdout).map(|_| true),
        Command::Eval(_) => cmd_eval(&mut cfg, out, stdout).map(|_| true),
        Command::Ablate(_) => cmd_ablate(&mut cfg, out, stdout).map(|_| true),
        Command::Gradcheck(_) => cmd_gradcheck(&mut cfg, out, stdout),
    };
    let saved = write_json(&out.join(format!("{name}.config.json")), &cfg);
    match (result, saved) {
        (Ok(true), Ok(())) => EXIT_OK,
        (Ok(false), Ok(())) => EXIT_RUNTIME,
        (Err(e), _) | (_, Err(e)) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}
