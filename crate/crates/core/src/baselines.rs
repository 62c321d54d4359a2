//! Classic single-score calibrators: histogram binning, isotonic regression,
//! smoothed isotonic regression, Platt scaling and temperature scaling.
//!
//! Every calibrator is produced by a `fit_*` function, so a value of any of
//! these types is always fitted.

use serde::{Deserialize, Serialize};

use crate::basis::{logit, sigmoid};
use crate::data::{clamp_prob, BucketMode, BucketSpec, Dataset};
use crate::error::{Error, Result};

/// Default number of histogram bins.
pub const DEFAULT_HISTOGRAM_BINS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Histogram,
    Isotonic,
    Sir,
    Platt,
    Temperature,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 5] = [
        BaselineKind::Histogram,
        BaselineKind::Isotonic,
        BaselineKind::Sir,
        BaselineKind::Platt,
        BaselineKind::Temperature,
    ];

    /// Short name used on the command line.
    pub fn key(self) -> &'static str {
        match self {
            BaselineKind::Histogram => "hb",
            BaselineKind::Isotonic => "ir",
            BaselineKind::Sir => "sir",
            BaselineKind::Platt => "platt",
            BaselineKind::Temperature => "temp",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            BaselineKind::Histogram => "HB",
            BaselineKind::Isotonic => "IR",
            BaselineKind::Sir => "SIR",
            BaselineKind::Platt => "Platt",
            BaselineKind::Temperature => "Temperature",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        BaselineKind::ALL
            .into_iter()
            .find(|k| k.key() == s)
            .ok_or_else(|| Error::invalid(format!("unknown baseline `{s}`")))
    }
}

/// Per-bin empirical positive rates over score bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinTable {
    pub bins: BucketSpec,
    pub values: Vec<f64>,
}

impl BinTable {
    pub fn apply(&self, p: f64) -> f64 {
        clamp_prob(self.values[self.bins.bucket_of(clamp_prob(p))])
    }
}

/// Monotone breakpoints evaluated as a step function (IR) or by linear
/// interpolation with flat extrapolation (SIR).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsotonicFit {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub interpolate: bool,
}

impl IsotonicFit {
    pub fn apply(&self, p: f64) -> f64 {
        // Index of the first breakpoint strictly above p.
        let k = self.x.partition_point(|&x| x <= p);
        let v = if !self.interpolate {
            self.y[k.saturating_sub(1)]
        } else if k == 0 {
            self.y[0]
        } else if k == self.x.len() {
            self.y[k - 1]
        } else {
            let (x0, x1) = (self.x[k - 1], self.x[k]);
            let w = (p - x0) / (x1 - x0);
            self.y[k - 1] + w * (self.y[k] - self.y[k - 1])
        };
        clamp_prob(v)
    }
}

/// `p = sigmoid(a · logit(p̂) + b)`; temperature scaling fixes `b = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlattParams {
    pub a: f64,
    pub b: f64,
}

impl PlattParams {
    pub const IDENTITY: PlattParams = PlattParams { a: 1.0, b: 0.0 };

    pub fn apply(&self, p: f64) -> f64 {
        clamp_prob(sigmoid(self.a * logit(p) + self.b))
    }
}

/// A fitted baseline of any kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Baseline {
    Histogram(BinTable),
    Isotonic(IsotonicFit),
    Sir(IsotonicFit),
    Platt(PlattParams),
    Temperature(PlattParams),
}

impl Baseline {
    /// Fits `kind` with default settings on `(scores, labels)`.
    pub fn fit(kind: BaselineKind, scores: &[f64], labels: &[f64]) -> Result<Baseline> {
        Ok(match kind {
            BaselineKind::Histogram => Baseline::Histogram(histogram(
                scores,
                labels,
                DEFAULT_HISTOGRAM_BINS,
                BucketMode::Quantile,
            )?),
            BaselineKind::Isotonic => Baseline::Isotonic(isotonic(scores, labels)?),
            BaselineKind::Sir => Baseline::Sir(sir(scores, labels)?),
            BaselineKind::Platt => Baseline::Platt(platt(scores, labels)?),
            BaselineKind::Temperature => Baseline::Temperature(temperature(scores, labels)?),
        })
    }

    pub fn fit_dataset(kind: BaselineKind, data: &Dataset) -> Result<Baseline> {
        Baseline::fit(kind, &data.p_uncalib(), &data.labels())
    }

    pub fn kind(&self) -> BaselineKind {
        match self {
            Baseline::Histogram(_) => BaselineKind::Histogram,
            Baseline::Isotonic(_) => BaselineKind::Isotonic,
            Baseline::Sir(_) => BaselineKind::Sir,
            Baseline::Platt(_) => BaselineKind::Platt,
            Baseline::Temperature(_) => BaselineKind::Temperature,
        }
    }

    pub fn apply(&self, p: f64) -> f64 {
        match self {
            Baseline::Histogram(t) => t.apply(p),
            Baseline::Isotonic(f) | Baseline::Sir(f) => f.apply(p),
            Baseline::Platt(pp) | Baseline::Temperature(pp) => pp.apply(p),
        }
    }

    pub fn apply_all(&self, scores: &[f64]) -> Vec<f64> {
        scores.iter().map(|&p| self.apply(p)).collect()
    }
}

fn check_inputs(scores: &[f64], labels: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::invalid("cannot fit a calibrator on no samples"));
    }
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().chain(labels).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("calibrator input".into()));
    }
    Ok(())
}

/// Histogram binning with `k` bins. Empty bins take the value of the nearest
/// non-empty bin, preferring the lower one on ties.
pub fn histogram(scores: &[f64], labels: &[f64], k: usize, mode: BucketMode) -> Result<BinTable> {
    check_inputs(scores, labels)?;
    if k < 1 {
        return Err(Error::invalid("histogram binning needs at least one bin"));
    }
    let bins = if k == 1 {
        BucketSpec::new(Vec::new(), mode)?
    } else {
        BucketSpec::fit(scores, k, mode)?
    };
    let nb = bins.bucket_count();
    let mut sum = vec![0.0; nb];
    let mut count = vec![0usize; nb];
    for (&p, &y) in scores.iter().zip(labels) {
        let b = bins.bucket_of(clamp_prob(p));
        sum[b] += y;
        count[b] += 1;
    }
    let filled: Vec<usize> = (0..nb).filter(|&b| count[b] > 0).collect();
    let values = (0..nb)
        .map(|b| {
            let src = if count[b] > 0 {
                b
            } else {
                *filled
                    .iter()
                    .min_by_key(|&&f| (f.abs_diff(b), f))
                    .expect("at least one sample")
            };
            sum[src] / count[src] as f64
        })
        .collect();
    Ok(BinTable { bins, values })
}

pub fn fit_histogram(data: &Dataset, k: usize, mode: BucketMode) -> Result<BinTable> {
    histogram(&data.p_uncalib(), &data.labels(), k, mode)
}

/// Weighted pool-adjacent-violators: the non-decreasing sequence minimizing
/// `Σ w_i (f_i - y_i)²`.
pub fn pava(y: &[f64], w: &[f64]) -> Vec<f64> {
    assert_eq!(y.len(), w.len(), "pava needs one weight per value");
    // Blocks of (weighted mean, total weight, length).
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(y.len());
    for (&yi, &wi) in y.iter().zip(w) {
        blocks.push((yi, wi, 1));
        while blocks.len() > 1 && blocks[blocks.len() - 2].0 > blocks[blocks.len() - 1].0 {
            let (m2, w2, n2) = blocks.pop().expect("two blocks");
            let (m1, w1, n1) = blocks.pop().expect("two blocks");
            let wt = w1 + w2;
            blocks.push(((m1 * w1 + m2 * w2) / wt, wt, n1 + n2));
        }
    }
    blocks
        .iter()
        .flat_map(|&(m, _, n)| std::iter::repeat_n(m, n))
        .collect()
}

// Distinct sorted scores with their label sums and counts.
fn tie_groups(scores: &[f64], labels: &[f64]) -> Vec<(f64, f64, f64)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut groups: Vec<(f64, f64, f64)> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if g.0 == scores[i] => {
                g.1 += labels[i];
                g.2 += 1.0;
            }
            _ => groups.push((scores[i], labels[i], 1.0)),
        }
    }
    groups
}

/// Fitted isotonic value of every distinct score, in ascending score order.
fn isotonic_levels(scores: &[f64], labels: &[f64]) -> (Vec<(f64, f64, f64)>, Vec<f64>) {
    let groups = tie_groups(scores, labels);
    let means: Vec<f64> = groups.iter().map(|g| g.1 / g.2).collect();
    let weights: Vec<f64> = groups.iter().map(|g| g.2).collect();
    let fitted = pava(&means, &weights);
    (groups, fitted)
}

/// Isotonic regression evaluated as a step function starting at each block.
pub fn isotonic(scores: &[f64], labels: &[f64]) -> Result<IsotonicFit> {
    check_inputs(scores, labels)?;
    let (groups, fitted) = isotonic_levels(scores, labels);
    let mut x = Vec::new();
    let mut y: Vec<f64> = Vec::new();
    for (g, &f) in groups.iter().zip(&fitted) {
        if y.last() != Some(&f) {
            x.push(g.0);
            y.push(f);
        }
    }
    Ok(IsotonicFit {
        x,
        y,
        interpolate: false,
    })
}

pub fn fit_isotonic(data: &Dataset) -> Result<IsotonicFit> {
    isotonic(&data.p_uncalib(), &data.labels())
}

/// Isotonic regression interpolated linearly between block centroids.
pub fn sir(scores: &[f64], labels: &[f64]) -> Result<IsotonicFit> {
    check_inputs(scores, labels)?;
    let (groups, fitted) = isotonic_levels(scores, labels);
    let mut x: Vec<f64> = Vec::new();
    let mut y: Vec<f64> = Vec::new();
    let mut start = 0;
    while start < groups.len() {
        let mut end = start + 1;
        while end < groups.len() && fitted[end] == fitted[start] {
            end += 1;
        }
        let block = &groups[start..end];
        let weight: f64 = block.iter().map(|g| g.2).sum();
        let centroid = block.iter().map(|g| g.0 * g.2).sum::<f64>() / weight;
        // Centroids of consecutive blocks are strictly increasing because the
        // blocks cover disjoint ascending score ranges.
        x.push(centroid);
        y.push(fitted[start]);
        start = end;
    }
    Ok(IsotonicFit {
        x,
        y,
        interpolate: true,
    })
}

pub fn fit_sir(data: &Dataset) -> Result<IsotonicFit> {
    sir(&data.p_uncalib(), &data.labels())
}

const NEWTON_TOL: f64 = 1e-8;
const NEWTON_MAX_ITER: usize = 200;

fn both_classes(labels: &[f64]) -> Result<()> {
    let pos = labels.iter().filter(|&&y| y > 0.5).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::Undefined(
            "Platt and temperature scaling need both classes".into(),
        ));
    }
    Ok(())
}

// Mean log-loss of sigmoid(a z + b) with its gradient and Hessian in (a, b).
fn platt_objective(z: &[f64], y: &[f64], a: f64, b: f64) -> (f64, [f64; 2], [[f64; 2]; 2]) {
    let n = z.len() as f64;
    let (mut loss, mut g, mut h) = (0.0, [0.0; 2], [[0.0; 2]; 2]);
    for (&zi, &yi) in z.iter().zip(y) {
        let s = a * zi + b;
        // log(1 + e^s) - y s, computed stably.
        loss += s.max(0.0) + (-s.abs()).exp().ln_1p() - yi * s;
        let p = sigmoid(s);
        let r = p - yi;
        let c = p * (1.0 - p);
        g[0] += r * zi;
        g[1] += r;
        h[0][0] += c * zi * zi;
        h[0][1] += c * zi;
        h[1][1] += c;
    }
    h[1][0] = h[0][1];
    for v in g.iter_mut() {
        *v /= n;
    }
    for row in h.iter_mut() {
        for v in row.iter_mut() {
            *v /= n;
        }
    }
    (loss / n, g, h)
}

// Damped Newton with backtracking; `fit_b = false` keeps b at 0.
fn newton(z: &[f64], y: &[f64], fit_b: bool) -> Result<PlattParams> {
    let (mut a, mut b) = (1.0, 0.0);
    for _ in 0..NEWTON_MAX_ITER {
        let (loss, g, h) = platt_objective(z, y, a, b);
        let gnorm = if fit_b { g[0].hypot(g[1]) } else { g[0].abs() };
        if gnorm < NEWTON_TOL {
            return Ok(PlattParams { a, b });
        }
        let (da, db) = if fit_b {
            let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
            if det > 1e-300 {
                (
                    -(h[1][1] * g[0] - h[0][1] * g[1]) / det,
                    -(h[0][0] * g[1] - h[1][0] * g[0]) / det,
                )
            } else {
                (-g[0], -g[1])
            }
        } else if h[0][0] > 1e-300 {
            (-g[0] / h[0][0], 0.0)
        } else {
            (-g[0], 0.0)
        };
        let slope = g[0] * da + g[1] * db;
        let mut step = 1.0;
        loop {
            let (na, nb) = (a + step * da, b + step * db);
            let (nl, _, _) = platt_objective(z, y, na, nb);
            // Near the optimum the decrease drops below the rounding error
            // of the loss, so a step that leaves it unchanged is accepted.
            if nl <= loss + 1e-4 * step * slope || (nl - loss).abs() <= 1e-14 * loss.max(1.0) {
                a = na;
                b = nb;
                break;
            }
            step *= 0.5;
            if step < 1e-12 {
                // No further decrease is representable; accept the current point.
                return Ok(PlattParams { a, b });
            }
        }
        if !(a.is_finite() && b.is_finite()) {
            return Err(Error::NonFinite("Platt scaling diverged".into()));
        }
    }
    Err(Error::NonFinite(format!(
        "Platt scaling did not converge in {NEWTON_MAX_ITER} iterations (separable scores?)"
    )))
}

/// Platt scaling on the logit of the input score.
pub fn platt(scores: &[f64], labels: &[f64]) -> Result<PlattParams> {
    check_inputs(scores, labels)?;
    both_classes(labels)?;
    let z: Vec<f64> = scores.iter().map(|&p| logit(p)).collect();
    newton(&z, labels, true)
}

/// Platt scaling with the intercept fixed at zero.
pub fn temperature(scores: &[f64], labels: &[f64]) -> Result<PlattParams> {
    check_inputs(scores, labels)?;
    both_classes(labels)?;
    let z: Vec<f64> = scores.iter().map(|&p| logit(p)).collect();
    newton(&z, labels, false)
}

pub fn fit_platt(data: &Dataset) -> Result<PlattParams> {
    platt(&data.p_uncalib(), &data.labels())
}

pub fn fit_temperature(data: &Dataset) -> Result<PlattParams> {
    temperature(&data.p_uncalib(), &data.labels())
}
