//! Slow, obviously-correct reference implementations shared by the
//! integration tests. Nothing here reuses library code beyond the data types.
#![allow(dead_code)]

use desc_calib::data::{Dataset, FieldSchema, Role, Sample};
use desc_calib::metrics::BinningMode;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Minimum squared error over every split of `y` into contiguous blocks
/// with non-decreasing means, returning the fitted vector.
pub fn exhaustive_isotonic(y: &[f64]) -> Vec<f64> {
    let n = y.len();
    let mut best = (f64::INFINITY, Vec::new());
    for mask in 0u32..(1 << (n - 1)) {
        let mut fit = Vec::with_capacity(n);
        let mut start = 0;
        let mut prev = f64::NEG_INFINITY;
        let mut ok = true;
        for end in 1..=n {
            if end == n || mask & (1 << (end - 1)) != 0 {
                let m = y[start..end].iter().sum::<f64>() / (end - start) as f64;
                if m < prev {
                    ok = false;
                    break;
                }
                prev = m;
                fit.extend(std::iter::repeat_n(m, end - start));
                start = end;
            }
        }
        if ok {
            let sse: f64 = fit.iter().zip(y).map(|(f, v)| (f - v).powi(2)).sum();
            if sse < best.0 - 1e-12 {
                best = (sse, fit);
            }
        }
    }
    best.1
}

/// A random multi-field dataset with deliberately tied scores.
pub fn random_dataset(rng: &mut ChaCha8Rng, n: usize) -> Dataset {
    let fields = rng.random_range(1..=3);
    let names = (0..fields).map(|f| format!("f{f}")).collect();
    let cards: Vec<usize> = (0..fields).map(|_| rng.random_range(1..=6)).collect();
    let vocabs = cards
        .iter()
        .map(|&k| (0..k).map(|v| format!("v{v}")).collect())
        .collect();
    let schema = FieldSchema::new(names, vocabs).unwrap();
    let levels = rng.random_range(2..=40);
    let samples = (0..n)
        .map(|_| {
            let p = (rng.random_range(0..levels) as f64 + 0.5) / levels as f64;
            Sample {
                label: u8::from(rng.random_bool(p)),
                p_uncalib: p,
                field_values: cards.iter().map(|&k| rng.random_range(1..=k as u32)).collect(),
            }
        })
        .collect();
    Dataset::new(schema, samples, Role::Test).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn members(ds: &Dataset, field: usize, value: u32) -> Vec<usize> {
    (0..ds.len())
        .filter(|&i| ds.samples[i].field_values[field] == value)
        .collect()
}

fn values(ds: &Dataset, field: usize) -> Vec<u32> {
    (0..ds.schema.vocab_size(field) as u32)
        .filter(|&v| !members(ds, field, v).is_empty())
        .collect()
}

/// Position of `i` within `idx` when ordered by score, then index.
fn rank(pu: &[f64], idx: &[usize], i: usize) -> usize {
    idx.iter()
        .filter(|&&j| pu[j] < pu[i] || (pu[j] == pu[i] && j < i))
        .count()
}

/// Bin of every member of `idx`, found by direct search.
fn bin_of(pu: &[f64], idx: &[usize], i: usize, m: usize, mode: BinningMode) -> usize {
    match mode {
        BinningMode::EqualFrequency => {
            let (r, n) = (rank(pu, idx, i), idx.len());
            (0..m).find(|&b| r < (b + 1) * n / m).unwrap()
        }
        BinningMode::EqualWidth => (0..m)
            .find(|&b| pu[i] < (b + 1) as f64 / m as f64)
            .unwrap_or(m - 1),
    }
}

fn binned_error(ds: &Dataset, p: &[f64], idx: &[usize], m: usize, mode: BinningMode) -> f64 {
    let pu = ds.p_uncalib();
    let mut err = 0.0;
    for b in 0..m {
        let members: Vec<usize> = idx
            .iter()
            .copied()
            .filter(|&i| bin_of(&pu, idx, i, m, mode) == b)
            .collect();
        if members.is_empty() {
            continue;
        }
        let k = members.len() as f64;
        let acc = members.iter().map(|&i| f64::from(ds.samples[i].label)).sum::<f64>() / k;
        let conf = members.iter().map(|&i| p[i]).sum::<f64>() / k;
        err += k / idx.len() as f64 * (acc - conf).abs();
    }
    err
}

/// `None` when every value subset lacks positives.
pub fn f_rce(ds: &Dataset, p: &[f64], field: usize) -> Option<f64> {
    let mut total = 0.0;
    let mut used = false;
    for v in values(ds, field) {
        let idx = members(ds, field, v);
        let pos: f64 = idx.iter().map(|&i| f64::from(ds.samples[i].label)).sum();
        if pos == 0.0 {
            continue;
        }
        used = true;
        let resid: f64 = idx.iter().map(|&i| f64::from(ds.samples[i].label) - p[i]).sum();
        total += resid.abs() * idx.len() as f64 / pos;
    }
    used.then(|| total / ds.len() as f64)
}

pub fn f_ece(ds: &Dataset, p: &[f64], field: usize, m: usize, mode: BinningMode) -> f64 {
    values(ds, field)
        .into_iter()
        .map(|v| {
            let idx = members(ds, field, v);
            idx.len() as f64 * binned_error(ds, p, &idx, m, mode)
        })
        .sum::<f64>()
        / ds.len() as f64
}

pub fn ece(ds: &Dataset, p: &[f64], m: usize, mode: BinningMode) -> f64 {
    let idx: Vec<usize> = (0..ds.len()).collect();
    binned_error(ds, p, &idx, m, mode)
}

/// Pairwise Mann–Whitney statistic, ties count one half.
pub fn auc(labels: &[f64], s: &[f64]) -> Option<f64> {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in 0..labels.len() {
        for j in 0..labels.len() {
            if labels[i] == 1.0 && labels[j] == 0.0 {
                pairs += 1.0;
                wins += if s[i] > s[j] {
                    1.0
                } else if s[i] == s[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

pub fn log_loss(labels: &[f64], p: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&y, &q) in labels.iter().zip(p) {
        let q = q.clamp(1e-15, 1.0 - 1e-15);
        total -= if y == 1.0 { q.ln() } else { (1.0 - q).ln() };
    }
    total / labels.len() as f64
}

pub fn pcoc(labels: &[f64], p: &[f64]) -> Option<f64> {
    let pos: f64 = labels.iter().sum();
    (pos > 0.0).then(|| p.iter().sum::<f64>() / pos)
}

pub fn complexity(ds: &Dataset, p: &[f64], field: usize, value: u32, q: usize) -> Option<f64> {
    let idx = members(ds, field, value);
    if idx.len() < q {
        return None;
    }
    let pu = ds.p_uncalib();
    let mut pcocs = Vec::new();
    for b in 0..q {
        let bin: Vec<usize> = idx
            .iter()
            .copied()
            .filter(|&i| bin_of(&pu, &idx, i, q, BinningMode::EqualFrequency) == b)
            .collect();
        let y: Vec<f64> = bin.iter().map(|&i| f64::from(ds.samples[i].label)).collect();
        let pp: Vec<f64> = bin.iter().map(|&i| p[i]).collect();
        pcocs.push(pcoc(&y, &pp)?);
    }
    let mut d = 0.0;
    for b in 1..q {
        d += (pcocs[b] - pcocs[b - 1]).abs();
    }
    Some(d / (q - 1) as f64)
}

/// For every sample, its successor is the next sample with identical field
/// values in (score, index) order; a pair counts when the score rises.
pub fn order_violation_rate(ds: &Dataset, p: &[f64]) -> f64 {
    let s = &ds.samples;
    let key = |i: usize| (s[i].p_uncalib, i);
    let mut pairs = 0;
    let mut bad = 0;
    for i in 0..s.len() {
        let next = (0..s.len())
            .filter(|&j| s[j].field_values == s[i].field_values && key(j) > key(i))
            .min_by(|&a, &b| key(a).partial_cmp(&key(b)).unwrap());
        if let Some(j) = next {
            if s[j].p_uncalib > s[i].p_uncalib {
                pairs += 1;
                if p[j] < p[i] - 1e-12 {
                    bad += 1;
                }
            }
        }
    }
    if pairs == 0 {
        0.0
    } else {
        bad as f64 / pairs as f64
    }
}

pub fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()))
}

/// Compares every library metric with its reference on one dataset and a
/// random calibrated score vector. Returns the first mismatch.
pub fn check_metrics(ds: &Dataset, p: &[f64]) -> Result<(), String> {
    use desc_calib::metrics as lib;
    let labels = ds.labels();
    let mismatch = |what: &str, got: f64, want: f64| -> Result<(), String> {
        if close(got, want) {
            Ok(())
        } else {
            Err(format!("{what}: library {got} vs reference {want}"))
        }
    };
    for field in 0..ds.schema.field_count() {
        match (lib::f_rce(ds, p, field).ok(), f_rce(ds, p, field)) {
            (Some(a), Some(b)) => mismatch("F-RCE", a.value, b)?,
            (None, None) => {}
            (a, b) => return Err(format!("F-RCE definedness differs: {a:?} vs {b:?}")),
        }
        for mode in [BinningMode::EqualFrequency, BinningMode::EqualWidth] {
            for m in [1, 3, 10] {
                mismatch(
                    &format!("F-ECE@{m} {mode:?}"),
                    lib::f_ece(ds, p, field, m, mode).unwrap(),
                    f_ece(ds, p, field, m, mode),
                )?;
            }
        }
        for v in 0..ds.schema.vocab_size(field) as u32 {
            for q in [2, 3, 5] {
                let got = lib::miscalibration_complexity(ds, p, field, v, q).unwrap();
                let want = complexity(ds, p, field, v, q);
                match (got, want) {
                    (Some(a), Some(b)) => mismatch("complexity", a, b)?,
                    (None, None) => {}
                    _ => return Err(format!("complexity definedness differs: {got:?} vs {want:?}")),
                }
            }
        }
    }
    let fields: Vec<usize> = (0..ds.schema.field_count()).collect();
    if let Ok((rce, ece10)) = lib::mf_metrics(ds, p, &fields, 10, BinningMode::EqualFrequency) {
        let n = fields.len() as f64;
        let want_rce: f64 = fields.iter().map(|&f| f_rce(ds, p, f).unwrap()).sum::<f64>() / n;
        let want_ece: f64 = fields
            .iter()
            .map(|&f| f_ece(ds, p, f, 10, BinningMode::EqualFrequency))
            .sum::<f64>()
            / n;
        mismatch("MF-RCE", rce, want_rce)?;
        mismatch("MF-ECE@10", ece10, want_ece)?;
    }
    for mode in [BinningMode::EqualFrequency, BinningMode::EqualWidth] {
        for m in [1, 3, 10] {
            mismatch(
                &format!("ECE@{m} {mode:?}"),
                lib::ece(&labels, p, &ds.p_uncalib(), m, mode).unwrap(),
                ece(ds, p, m, mode),
            )?;
        }
    }
    match (lib::auc(&labels, p).ok(), auc(&labels, p)) {
        (Some(a), Some(b)) => mismatch("AUC", a, b)?,
        (None, None) => {}
        (a, b) => return Err(format!("AUC definedness differs: {a:?} vs {b:?}")),
    }
    match (lib::pcoc(&labels, p).ok(), pcoc(&labels, p)) {
        (Some(a), Some(b)) => mismatch("PCOC", a, b)?,
        (None, None) => {}
        (a, b) => return Err(format!("PCOC definedness differs: {a:?} vs {b:?}")),
    }
    mismatch("log-loss", lib::log_loss(&labels, p).unwrap(), log_loss(&labels, p))?;
    mismatch(
        "order violations",
        lib::order_violation_rate(ds, p).unwrap(),
        order_violation_rate(ds, p),
    )?;
    Ok(())
}

/// Random calibrated scores for `ds`, some of them tied.
pub fn random_scores(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            if rng.random_bool(0.2) {
                0.5
            } else {
                rng.random_range(0.001..0.999)
            }
        })
        .collect()
}

/// Builds a dataset from `(label, p_uncalib, field values)` rows; `vocab[f]`
/// counts the out-of-vocabulary slot.
pub fn dataset(rows: &[(u8, f64, &[u32])], vocab: &[usize]) -> Dataset {
    let names = (0..vocab.len()).map(|i| format!("f{i}")).collect();
    let vocabs = vocab
        .iter()
        .map(|&k| (1..k).map(|v| format!("v{v}")).collect())
        .collect();
    let schema = FieldSchema::new(names, vocabs).unwrap();
    let samples = rows
        .iter()
        .map(|&(label, p, f)| Sample {
            label,
            p_uncalib: p,
            field_values: f.to_vec(),
        })
        .collect();
    Dataset::new(schema, samples, Role::Test).unwrap()
}
