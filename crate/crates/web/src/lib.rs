//! WebAssembly bindings for the demo page in `www/`.
//!
//! Every export returns a JSON string. The plain Rust functions behind them
//! are public so they can be tested natively.

use desc_calib::baselines::{Baseline, BaselineKind};
use desc_calib::basis::BasisFamily;
use desc_calib::data::split;
use desc_calib::desc::{fit, DescConfig};
use desc_calib::metrics::{evaluate, reliability_bins, BinningMode, MetricsConfig, ReliabilityBin};
use desc_calib::synthgen::{generate, Distortion, DistortionSpec, GenConfig};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const MAX_POINTS: usize = 2000;
const MAX_SAMPLES: usize = 100_000;

#[derive(Serialize)]
struct Curve {
    label: String,
    values: Vec<f64>,
}

#[derive(Serialize)]
struct Curves {
    t: Vec<f64>,
    curves: Vec<Curve>,
}

fn grid(points: usize) -> Result<Vec<f64>, String> {
    if !(2..=MAX_POINTS).contains(&points) {
        return Err(format!("points must be between 2 and {MAX_POINTS}"));
    }
    Ok((0..points)
        .map(|i| (i as f64 + 0.5) / points as f64)
        .collect())
}

fn parse_list(text: &str) -> Result<Vec<f64>, String> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| format!("`{s}` is not a number")))
        .collect()
}

fn to_json(v: &impl Serialize) -> Result<String, String> {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

/// Curves of one basis family (`power`, `log` or `scaling`) for the given
/// comma-separated hyperparameters.
pub fn basis_curves(kind: &str, params: &str, points: usize) -> Result<String, String> {
    let params = parse_list(params)?;
    if params.is_empty() {
        return Err("give at least one hyperparameter".into());
    }
    let (family, symbol) = match kind {
        "power" => (BasisFamily::new(params.clone(), vec![], vec![], false), "h"),
        "log" => (BasisFamily::new(vec![], params.clone(), vec![], false), "v"),
        "scaling" => (BasisFamily::new(vec![], vec![], params.clone(), false), "a"),
        other => return Err(format!("unknown basis kind `{other}`")),
    };
    let family = family.map_err(|e| e.to_string())?;
    let t = grid(points)?;
    let rows: Vec<Vec<f64>> = t.iter().map(|&x| family.eval(x)).collect();
    let curves = params
        .iter()
        .enumerate()
        .map(|(j, p)| Curve {
            label: format!("{symbol}={p}"),
            values: rows.iter().map(|r| r[j]).collect(),
        })
        .collect();
    to_json(&Curves { t, curves })
}

/// The map from true probability to distorted score for one field value.
pub fn distortion_curve(value_bias: f64, shape_exponent: f64, points: usize) -> Result<String, String> {
    if !(value_bias > 0.0 && shape_exponent > 0.0) {
        return Err("bias and exponent must be positive".into());
    }
    let d = Distortion {
        field: String::new(),
        value: String::new(),
        value_bias,
        shape_exponent,
    };
    let t = grid(points)?;
    let curves = vec![
        Curve {
            label: "identity".into(),
            values: t.clone(),
        },
        Curve {
            label: format!("bias {value_bias}, exponent {shape_exponent}"),
            values: t.iter().map(|&p| d.apply(p)).collect(),
        },
    ];
    to_json(&Curves { t, curves })
}

#[derive(Serialize)]
struct Scores {
    mf_ece_10: Option<f64>,
    log_loss: f64,
    auc: Option<f64>,
}

#[derive(Serialize)]
struct CalibrationDemo {
    method: String,
    samples: usize,
    before: Scores,
    after: Scores,
    reliability_before: Vec<ReliabilityBin>,
    reliability_after: Vec<ReliabilityBin>,
}

/// Small DESC settings that train in a couple of seconds in a browser.
pub fn demo_desc_config(seed: u64) -> DescConfig {
    DescConfig {
        embedding_dim: 8,
        bucket_count: 20,
        alloc_mlp_hidden: 16,
        value_mlp1_hidden: 16,
        batch_size: 512,
        epochs: 8,
        lr: 5e-3,
        seed,
        ..DescConfig::default()
    }
}

/// Generates a distorted two-field sample, fits `method` on one third of
/// it and scores the calibrated predictions on another third.
pub fn calibrate(method: &str, seed: u64, samples: usize) -> Result<String, String> {
    if !(300..=MAX_SAMPLES).contains(&samples) {
        return Err(format!("samples must be between 300 and {MAX_SAMPLES}"));
    }
    let err = |e: desc_calib::Error| e.to_string();
    let gen = GenConfig {
        cardinalities: vec![8, 4],
        base_logit: -1.5,
        field_effect_scale: 0.5,
        sample_count: samples,
        seed,
    };
    let distortion = DistortionSpec::round_robin("z0", 8, &[0.5, 2.0], &[0.6, 1.6]);
    let data = generate(&gen, &distortion).map_err(err)?.dataset;
    let (_, calibration, test) = split(&data, [1.0 / 3.0; 3], seed).map_err(err)?;

    let raw = test.p_uncalib();
    let calibrated = if method == "desc" {
        let (model, _) = fit(&calibration, &demo_desc_config(seed)).map_err(err)?;
        model.predict(&test).map_err(err)?
    } else {
        let kind = BaselineKind::parse(method).map_err(err)?;
        Baseline::fit_dataset(kind, &calibration).map_err(err)?.apply_all(&raw)
    };

    let metrics = MetricsConfig {
        m_values: vec![10],
        ..MetricsConfig::default()
    };
    let score = |p: &[f64]| -> Result<Scores, String> {
        let r = evaluate(&test, p, &metrics).map_err(err)?;
        Ok(Scores {
            mf_ece_10: r.mf_ece_at(10),
            log_loss: r.log_loss,
            auc: r.auc,
        })
    };
    let labels = test.labels();
    let bins = |p: &[f64]| reliability_bins(&labels, p, &raw, 10, BinningMode::EqualFrequency);
    to_json(&CalibrationDemo {
        method: method.to_string(),
        samples: test.len(),
        before: score(&raw)?,
        after: score(&calibrated)?,
        reliability_before: bins(&raw),
        reliability_after: bins(&calibrated),
    })
}

#[wasm_bindgen(js_name = basisCurves)]
pub fn basis_curves_js(kind: &str, params: &str, points: usize) -> Result<String, JsError> {
    basis_curves(kind, params, points).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = distortionCurve)]
pub fn distortion_curve_js(value_bias: f64, shape_exponent: f64, points: usize) -> Result<String, JsError> {
    distortion_curve(value_bias, shape_exponent, points).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = calibrate)]
pub fn calibrate_js(method: &str, seed: u32, samples: usize) -> Result<String, JsError> {
    calibrate(method, u64::from(seed), samples).map_err(|e| JsError::new(&e))
}
