//! The seeded synthetic recovery benchmark: generate distorted data, split
//! it, fit DESC and the baselines on the validation split and score
//! everything on the test split.

use serde::{Deserialize, Serialize};

use crate::baselines::{Baseline, BaselineKind};
use crate::data::{split, Dataset};
use crate::desc::{fit, DescConfig, TrainReport, Variant};
use crate::error::Result;
use crate::metrics::{evaluate, MetricsConfig, MetricsReport};
use crate::synthgen::{generate, DistortionSpec, GenConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub gen: GenConfig,
    pub distortion: DistortionSpec,
    /// Train / validation / test fractions.
    pub split: [f64; 3],
    pub split_seed: u64,
    pub desc: DescConfig,
    pub metrics: MetricsConfig,
    pub baselines: Vec<BaselineKind>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            gen: GenConfig {
                cardinalities: vec![20, 10, 5],
                base_logit: -1.5,
                field_effect_scale: 0.5,
                sample_count: 300_000,
                seed: 42,
            },
            distortion: DistortionSpec::round_robin("z0", 20, &[0.5, 2.0], &[0.6, 1.6]),
            split: [4.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0],
            split_seed: 42,
            desc: DescConfig {
                seed: 42,
                ..DescConfig::default()
            },
            metrics: MetricsConfig::default(),
            baselines: vec![
                BaselineKind::Histogram,
                BaselineKind::Isotonic,
                BaselineKind::Platt,
                BaselineKind::Sir,
            ],
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchmarkData {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

pub fn prepare(cfg: &BenchmarkConfig) -> Result<BenchmarkData> {
    let generated = generate(&cfg.gen, &cfg.distortion)?;
    let (train, validation, test) = split(&generated.dataset, cfg.split, cfg.split_seed)?;
    Ok(BenchmarkData {
        train,
        validation,
        test,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MethodResult {
    pub method: String,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchmarkResult {
    pub uncalibrated: MetricsReport,
    pub desc: MetricsReport,
    pub desc_training: TrainReport,
    pub baselines: Vec<MethodResult>,
}

/// Fits DESC and every configured baseline on the validation split and
/// evaluates them on the test split.
pub fn run(cfg: &BenchmarkConfig, data: &BenchmarkData) -> Result<BenchmarkResult> {
    let test_scores = data.test.p_uncalib();
    let uncalibrated = evaluate(&data.test, &test_scores, &cfg.metrics)?;
    let (model, desc_training) = fit(&data.validation, &cfg.desc)?;
    let desc = evaluate(&data.test, &model.predict(&data.test)?, &cfg.metrics)?;
    let baselines = cfg
        .baselines
        .iter()
        .map(|&kind| {
            let b = Baseline::fit_dataset(kind, &data.validation)?;
            Ok(MethodResult {
                method: kind.label().to_string(),
                report: evaluate(&data.test, &b.apply_all(&test_scores), &cfg.metrics)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BenchmarkResult {
        uncalibrated,
        desc,
        desc_training,
        baselines,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub label: String,
    pub reference: bool,
    pub report: MetricsReport,
}

/// Trains full DESC and each ablation under the same seed.
pub fn ablation(cfg: &BenchmarkConfig, calibration: &Dataset, evaluation: &Dataset) -> Result<Vec<AblationRow>> {
    [Variant::Full]
        .into_iter()
        .chain(Variant::ABLATIONS)
        .map(|variant| {
            let report = crate::desc::ablate(variant, calibration, evaluation, &cfg.desc, &cfg.metrics)?;
            Ok(AblationRow {
                variant,
                label: variant.label().to_string(),
                reference: variant == Variant::Full,
                report,
            })
        })
        .collect()
}
