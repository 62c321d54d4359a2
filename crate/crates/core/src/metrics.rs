//! Field-aware calibration metrics (F-RCE, F-ECE@M and their multi-field
//! means), global ECE, PCOC, AUC, log-loss, per-value miscalibration
//! complexity and the error ratio used to compare two calibrators.
//!
//! Whenever samples are binned, they are first ordered by `p_uncalib` with
//! ties broken by original index, so every metric is independent of the
//! order in which samples arrive.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinningMode {
    /// `M` bins of (nearly) equal size over the sort order.
    #[default]
    EqualFrequency,
    /// `M` equal-width intervals of `p_uncalib` over (0,1).
    EqualWidth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub m_values: Vec<usize>,
    pub binning: BinningMode,
    /// `Q` for miscalibration complexity.
    pub complexity_bins: usize,
    /// Restrict field metrics to these names; all fields when `None`.
    pub fields: Option<Vec<String>>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            m_values: vec![3, 10],
            binning: BinningMode::EqualFrequency,
            complexity_bins: 5,
            fields: None,
        }
    }
}

fn check_len(ds: &Dataset, p: &[f64]) -> Result<()> {
    if ds.len() != p.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} samples",
            p.len(),
            ds.len()
        )));
    }
    Ok(())
}

fn check_field(ds: &Dataset, field: usize) -> Result<()> {
    if field >= ds.schema.field_count() {
        return Err(Error::invalid(format!(
            "field index {field} out of range for {} fields",
            ds.schema.field_count()
        )));
    }
    Ok(())
}

/// Sample indices grouped by the value of `field`, ordered by value index.
fn group_by_value(ds: &Dataset, field: usize) -> Vec<(u32, Vec<usize>)> {
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); ds.schema.vocab_size(field)];
    for (i, s) in ds.samples.iter().enumerate() {
        groups[s.field_values[field] as usize].push(i);
    }
    groups
        .into_iter()
        .enumerate()
        .filter(|(_, g)| !g.is_empty())
        .map(|(v, g)| (v as u32, g))
        .collect()
}

/// Splits `idx` (sample indices) into `m` bins after ordering by
/// `p_uncalib` then index. Empty bins are returned as empty vectors.
pub fn bin_indices(p_uncalib: &[f64], idx: &[usize], m: usize, mode: BinningMode) -> Vec<Vec<usize>> {
    let mut order = idx.to_vec();
    order.sort_by(|&a, &b| p_uncalib[a].total_cmp(&p_uncalib[b]).then(a.cmp(&b)));
    let n = order.len();
    match mode {
        BinningMode::EqualFrequency => (0..m)
            .map(|b| order[b * n / m..(b + 1) * n / m].to_vec())
            .collect(),
        BinningMode::EqualWidth => {
            let mut bins = vec![Vec::new(); m];
            for i in order {
                let b = ((p_uncalib[i] * m as f64).floor() as usize).min(m - 1);
                bins[b].push(i);
            }
            bins
        }
    }
}

/// Weighted `|acc - conf|` over bins of `idx`, weights relative to `idx.len()`.
fn binned_error(labels: &[f64], p_calib: &[f64], p_uncalib: &[f64], idx: &[usize], m: usize, mode: BinningMode) -> f64 {
    let n = idx.len() as f64;
    bin_indices(p_uncalib, idx, m, mode)
        .iter()
        .filter(|b| !b.is_empty())
        .map(|b| {
            let k = b.len() as f64;
            let acc: f64 = b.iter().map(|&i| labels[i]).sum::<f64>() / k;
            let conf: f64 = b.iter().map(|&i| p_calib[i]).sum::<f64>() / k;
            k / n * (acc - conf).abs()
        })
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldRce {
    pub value: f64,
    /// Value subsets without any positive label.
    pub skipped: usize,
}

/// F-RCE of one field. Subsets with no positives are skipped and counted.
pub fn f_rce(ds: &Dataset, p_calib: &[f64], field: usize) -> Result<FieldRce> {
    check_len(ds, p_calib)?;
    check_field(ds, field)?;
    let mut total = 0.0;
    let mut skipped = 0;
    let mut used = 0;
    for (_, idx) in group_by_value(ds, field) {
        let pos: f64 = idx.iter().map(|&i| f64::from(ds.samples[i].label)).sum();
        if pos == 0.0 {
            skipped += 1;
            continue;
        }
        used += 1;
        let resid: f64 = idx
            .iter()
            .map(|&i| f64::from(ds.samples[i].label) - p_calib[i])
            .sum();
        total += resid.abs() / (pos / idx.len() as f64);
    }
    if used == 0 {
        return Err(Error::Undefined(format!(
            "F-RCE of field `{}`: every value subset lacks positives",
            ds.schema.field_names()[field]
        )));
    }
    Ok(FieldRce {
        value: total / ds.len() as f64,
        skipped,
    })
}

/// F-ECE@M of one field: per-value binned error weighted by subset size.
pub fn f_ece(ds: &Dataset, p_calib: &[f64], field: usize, m: usize, mode: BinningMode) -> Result<f64> {
    check_len(ds, p_calib)?;
    check_field(ds, field)?;
    if m == 0 {
        return Err(Error::invalid("M must be at least 1"));
    }
    if ds.is_empty() {
        return Err(Error::Undefined("F-ECE of an empty dataset".into()));
    }
    let labels = ds.labels();
    let pu = ds.p_uncalib();
    let total: f64 = group_by_value(ds, field)
        .iter()
        .map(|(_, idx)| idx.len() as f64 * binned_error(&labels, p_calib, &pu, idx, m, mode))
        .sum();
    Ok(total / ds.len() as f64)
}

/// Means of F-RCE and F-ECE@M over `fields`.
pub fn mf_metrics(ds: &Dataset, p_calib: &[f64], fields: &[usize], m: usize, mode: BinningMode) -> Result<(f64, f64)> {
    if fields.is_empty() {
        return Err(Error::invalid("at least one field is required"));
    }
    let mut rce = 0.0;
    let mut ece = 0.0;
    for &f in fields {
        rce += f_rce(ds, p_calib, f)?.value;
        ece += f_ece(ds, p_calib, f, m, mode)?;
    }
    let n = fields.len() as f64;
    Ok((rce / n, ece / n))
}

/// Predicted clicks over observed clicks.
pub fn pcoc(labels: &[f64], p: &[f64]) -> Result<f64> {
    let pos: f64 = labels.iter().sum();
    if pos == 0.0 {
        return Err(Error::Undefined("PCOC without positive labels".into()));
    }
    Ok(p.iter().sum::<f64>() / pos)
}

/// Global ECE@M with bins formed over the `p_uncalib` order.
pub fn ece(labels: &[f64], p_calib: &[f64], p_uncalib: &[f64], m: usize, mode: BinningMode) -> Result<f64> {
    if labels.len() != p_calib.len() || labels.len() != p_uncalib.len() {
        return Err(Error::invalid("ECE inputs differ in length"));
    }
    if m == 0 || labels.is_empty() {
        return Err(Error::invalid("ECE needs M ≥ 1 and at least one sample"));
    }
    let idx: Vec<usize> = (0..labels.len()).collect();
    Ok(binned_error(labels, p_calib, p_uncalib, &idx, m, mode))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub bin: usize,
    pub count: usize,
    pub p_uncalib_lo: f64,
    pub p_uncalib_hi: f64,
    pub confidence: f64,
    pub accuracy: f64,
}

/// Per-bin accuracy and confidence behind the global ECE.
pub fn reliability_bins(labels: &[f64], p_calib: &[f64], p_uncalib: &[f64], m: usize, mode: BinningMode) -> Vec<ReliabilityBin> {
    let idx: Vec<usize> = (0..labels.len()).collect();
    bin_indices(p_uncalib, &idx, m, mode)
        .into_iter()
        .enumerate()
        .filter(|(_, b)| !b.is_empty())
        .map(|(bin, b)| {
            let k = b.len() as f64;
            ReliabilityBin {
                bin,
                count: b.len(),
                p_uncalib_lo: p_uncalib[b[0]],
                p_uncalib_hi: p_uncalib[*b.last().expect("non-empty")],
                confidence: b.iter().map(|&i| p_calib[i]).sum::<f64>() / k,
                accuracy: b.iter().map(|&i| labels[i]).sum::<f64>() / k,
            }
        })
        .collect()
}

/// Mann–Whitney AUC with average ranks for tied scores.
pub fn auc(labels: &[f64], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::invalid("AUC inputs differ in length"));
    }
    let n_pos = labels.iter().filter(|&&y| y > 0.5).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Undefined("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their mean.
        let avg = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            if labels[k] > 0.5 {
                rank_sum_pos += avg;
            }
        }
        i = j + 1;
    }
    let np = n_pos as f64;
    Ok((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Mean negative log-likelihood.
pub fn log_loss(labels: &[f64], p: &[f64]) -> Result<f64> {
    if labels.len() != p.len() || labels.is_empty() {
        return Err(Error::invalid("log-loss inputs differ in length or are empty"));
    }
    let total: f64 = labels
        .iter()
        .zip(p)
        .map(|(&y, &p)| {
            let p = p.clamp(1e-15, 1.0 - 1e-15);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / labels.len() as f64)
}

/// Mean absolute change of PCOC between adjacent bins.
pub fn complexity_from_pcocs(pcocs: &[f64]) -> Result<f64> {
    if pcocs.len() < 2 {
        return Err(Error::invalid("miscalibration complexity needs Q > 1 bins"));
    }
    let s: f64 = pcocs.windows(2).map(|w| (w[1] - w[0]).abs()).sum();
    Ok(s / (pcocs.len() - 1) as f64)
}

/// Miscalibration complexity of samples with `field == value`, over `q`
/// equal-frequency bins by `p_uncalib`. `None` when the subset has fewer
/// than `q` samples or some bin has no positive label.
pub fn miscalibration_complexity(ds: &Dataset, p_calib: &[f64], field: usize, value: u32, q: usize) -> Result<Option<f64>> {
    check_len(ds, p_calib)?;
    check_field(ds, field)?;
    if q < 2 {
        return Err(Error::invalid("miscalibration complexity needs Q > 1"));
    }
    let idx: Vec<usize> = (0..ds.len())
        .filter(|&i| ds.samples[i].field_values[field] == value)
        .collect();
    Ok(complexity_of(ds, p_calib, &ds.p_uncalib(), &idx, q))
}

fn complexity_of(ds: &Dataset, p_calib: &[f64], pu: &[f64], idx: &[usize], q: usize) -> Option<f64> {
    if idx.len() < q {
        return None;
    }
    let mut pcocs = Vec::with_capacity(q);
    for b in bin_indices(pu, idx, q, BinningMode::EqualFrequency) {
        let pos: f64 = b.iter().map(|&i| f64::from(ds.samples[i].label)).sum();
        if pos == 0.0 {
            return None;
        }
        pcocs.push(b.iter().map(|&i| p_calib[i]).sum::<f64>() / pos);
    }
    complexity_from_pcocs(&pcocs).ok()
}

/// Ratio of two calibration errors, `ece_desc / ece_other`.
pub fn eer(ece_desc: f64, ece_other: f64) -> Result<f64> {
    if !(ece_other > 0.0) {
        return Err(Error::Undefined(format!(
            "error ratio against a reference error of {ece_other}"
        )));
    }
    Ok(ece_desc / ece_other)
}

/// Share of adjacent pairs, among samples with identical field values and
/// increasing `p_uncalib`, whose calibrated score decreases.
pub fn order_violation_rate(ds: &Dataset, p_calib: &[f64]) -> Result<f64> {
    check_len(ds, p_calib)?;
    let mut groups: HashMap<&[u32], Vec<usize>> = HashMap::new();
    for (i, s) in ds.samples.iter().enumerate() {
        groups.entry(&s.field_values).or_default().push(i);
    }
    let mut pairs = 0usize;
    let mut bad = 0usize;
    for idx in groups.values_mut() {
        idx.sort_by(|&a, &b| {
            ds.samples[a]
                .p_uncalib
                .total_cmp(&ds.samples[b].p_uncalib)
                .then(a.cmp(&b))
        });
        for w in idx.windows(2) {
            if ds.samples[w[1]].p_uncalib > ds.samples[w[0]].p_uncalib {
                pairs += 1;
                if p_calib[w[1]] < p_calib[w[0]] - 1e-12 {
                    bad += 1;
                }
            }
        }
    }
    Ok(if pairs == 0 { 0.0 } else { bad as f64 / pairs as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueReport {
    pub value: String,
    pub count: usize,
    pub positives: usize,
    pub pcoc: Option<f64>,
    pub complexity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldReport {
    pub name: String,
    pub f_rce: Option<f64>,
    pub rce_skipped_subsets: usize,
    /// Keyed by M.
    pub f_ece: BTreeMap<String, f64>,
    pub values: Vec<ValueReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_samples: usize,
    pub binning: BinningMode,
    pub m_values: Vec<usize>,
    pub complexity_bins: usize,
    pub auc: Option<f64>,
    pub log_loss: f64,
    pub pcoc: Option<f64>,
    pub ece: BTreeMap<String, f64>,
    pub mf_rce: Option<f64>,
    pub mf_ece: BTreeMap<String, f64>,
    pub order_violation_rate: f64,
    pub fields: Vec<FieldReport>,
}

impl MetricsReport {
    pub fn mf_ece_at(&self, m: usize) -> Option<f64> {
        self.mf_ece.get(&m.to_string()).copied()
    }

    pub fn ece_at(&self, m: usize) -> Option<f64> {
        self.ece.get(&m.to_string()).copied()
    }

    pub fn field(&self, name: &str) -> Option<&FieldReport> {
        self.fields.iter().find(|f| f.name == name)
    }
}

/// Resolves configured field names to indices.
pub fn resolve_fields(ds: &Dataset, names: Option<&[String]>) -> Result<Vec<usize>> {
    match names {
        None => Ok((0..ds.schema.field_count()).collect()),
        Some(names) => names
            .iter()
            .map(|n| {
                ds.schema
                    .field_index(n)
                    .ok_or_else(|| Error::invalid(format!("field `{n}` is not present in the data")))
            })
            .collect(),
    }
}

/// Every metric for one set of calibrated predictions.
pub fn evaluate(ds: &Dataset, p_calib: &[f64], cfg: &MetricsConfig) -> Result<MetricsReport> {
    check_len(ds, p_calib)?;
    if ds.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty dataset"));
    }
    if cfg.m_values.is_empty() || cfg.m_values.contains(&0) {
        return Err(Error::invalid("metric bin counts must be positive"));
    }
    let fields = resolve_fields(ds, cfg.fields.as_deref())?;
    let labels = ds.labels();
    let pu = ds.p_uncalib();

    let mut field_reports = Vec::with_capacity(fields.len());
    for &f in &fields {
        let rce = f_rce(ds, p_calib, f).ok();
        let mut f_eces = BTreeMap::new();
        for &m in &cfg.m_values {
            f_eces.insert(m.to_string(), f_ece(ds, p_calib, f, m, cfg.binning)?);
        }
        let values = group_by_value(ds, f)
            .into_iter()
            .map(|(v, idx)| {
                let y: Vec<f64> = idx.iter().map(|&i| labels[i]).collect();
                let p: Vec<f64> = idx.iter().map(|&i| p_calib[i]).collect();
                ValueReport {
                    value: ds.schema.token(f, v).to_string(),
                    count: idx.len(),
                    positives: y.iter().filter(|&&l| l > 0.5).count(),
                    pcoc: pcoc(&y, &p).ok(),
                    complexity: complexity_of(ds, p_calib, &pu, &idx, cfg.complexity_bins.max(2)),
                }
            })
            .collect();
        field_reports.push(FieldReport {
            name: ds.schema.field_names()[f].clone(),
            f_rce: rce.map(|r| r.value),
            rce_skipped_subsets: rce.map_or(0, |r| r.skipped),
            f_ece: f_eces,
            values,
        });
    }

    let n = field_reports.len() as f64;
    let mf_rce = field_reports
        .iter()
        .map(|f| f.f_rce)
        .sum::<Option<f64>>()
        .map(|s| s / n);
    let mut mf_ece = BTreeMap::new();
    let mut global = BTreeMap::new();
    for &m in &cfg.m_values {
        let key = m.to_string();
        mf_ece.insert(key.clone(), field_reports.iter().map(|f| f.f_ece[&key]).sum::<f64>() / n);
        global.insert(key, ece(&labels, p_calib, &pu, m, cfg.binning)?);
    }

    Ok(MetricsReport {
        n_samples: ds.len(),
        binning: cfg.binning,
        m_values: cfg.m_values.clone(),
        complexity_bins: cfg.complexity_bins,
        auc: auc(&labels, p_calib).ok(),
        log_loss: log_loss(&labels, p_calib)?,
        pcoc: pcoc(&labels, p_calib).ok(),
        ece: global,
        mf_rce,
        mf_ece,
        order_violation_rate: order_violation_rate(ds, p_calib)?,
        fields: field_reports,
    })
}
