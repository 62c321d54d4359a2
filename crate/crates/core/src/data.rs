//! Samples, schemas and CSV ingestion, plus score bucketing shared by the
//! DESC bucket feature, histogram binning and the metrics.
//!
//! The CSV layout is `label,p_uncalib,f_<name>...`; the order of `f_` columns
//! in the header fixes the field order everywhere downstream. Columns that are
//! neither required nor `f_`-prefixed (for example a generator's `p_true`) are
//! ignored by [`load_csv`] and can be read with [`read_column`].

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower clamp for every probability entering the toolkit.
pub const P_MIN: f64 = 1e-6;
/// Upper clamp for every probability entering the toolkit.
pub const P_MAX: f64 = 1.0 - 1e-6;

/// Token stored at index 0 of every vocabulary.
pub const OOV_TOKEN: &str = "<oov>";

pub const FIELD_PREFIX: &str = "f_";

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(P_MIN, P_MAX)
}

/// One labeled impression.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub label: u8,
    pub p_uncalib: f64,
    pub field_values: Vec<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Train,
    Validation,
    Test,
}

#[derive(Serialize, Deserialize)]
struct SchemaRepr {
    field_names: Vec<String>,
    vocabularies: Vec<Vec<String>>,
}

/// Field names and their vocabularies. Index 0 of every vocabulary is the
/// out-of-vocabulary slot.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "SchemaRepr", into = "SchemaRepr")]
pub struct FieldSchema {
    field_names: Vec<String>,
    vocabularies: Vec<Vec<String>>,
    lookup: Vec<HashMap<String, u32>>,
}

impl PartialEq for FieldSchema {
    fn eq(&self, other: &Self) -> bool {
        self.field_names == other.field_names && self.vocabularies == other.vocabularies
    }
}

impl From<FieldSchema> for SchemaRepr {
    fn from(s: FieldSchema) -> Self {
        SchemaRepr {
            field_names: s.field_names,
            vocabularies: s.vocabularies,
        }
    }
}

impl TryFrom<SchemaRepr> for FieldSchema {
    type Error = Error;

    fn try_from(r: SchemaRepr) -> Result<Self> {
        FieldSchema::new(r.field_names, r.vocabularies)
    }
}

impl FieldSchema {
    /// `vocabularies[i]` lists the real tokens of field `i`, optionally
    /// already prefixed by [`OOV_TOKEN`].
    pub fn new(field_names: Vec<String>, vocabularies: Vec<Vec<String>>) -> Result<Self> {
        if field_names.is_empty() {
            return Err(Error::Schema("at least one field is required".into()));
        }
        if field_names.len() != vocabularies.len() {
            return Err(Error::Schema(format!(
                "{} field names but {} vocabularies",
                field_names.len(),
                vocabularies.len()
            )));
        }
        for (i, name) in field_names.iter().enumerate() {
            if field_names[..i].contains(name) {
                return Err(Error::Schema(format!("duplicate field name `{name}`")));
            }
        }
        let mut vocabs = Vec::with_capacity(vocabularies.len());
        let mut lookup = Vec::with_capacity(vocabularies.len());
        for (name, mut vocab) in field_names.iter().zip(vocabularies) {
            if vocab.first().map(String::as_str) != Some(OOV_TOKEN) {
                vocab.insert(0, OOV_TOKEN.to_string());
            }
            if vocab.len() < 2 {
                return Err(Error::Schema(format!(
                    "field `{name}` needs at least one value besides OOV"
                )));
            }
            let mut map = HashMap::with_capacity(vocab.len());
            for (idx, tok) in vocab.iter().enumerate().skip(1) {
                if map.insert(tok.clone(), idx as u32).is_some() || tok == OOV_TOKEN {
                    return Err(Error::Schema(format!(
                        "field `{name}` lists token `{tok}` twice"
                    )));
                }
            }
            vocabs.push(vocab);
            lookup.push(map);
        }
        Ok(FieldSchema {
            field_names,
            vocabularies: vocabs,
            lookup,
        })
    }

    pub fn field_count(&self) -> usize {
        self.field_names.len()
    }

    pub fn field_names(&self) -> &[String] {
        &self.field_names
    }

    pub fn field_index(&self, name: &str) -> Option<usize> {
        self.field_names.iter().position(|n| n == name)
    }

    pub fn vocab_size(&self, field: usize) -> usize {
        self.vocabularies[field].len()
    }

    pub fn vocab_sizes(&self) -> Vec<usize> {
        self.vocabularies.iter().map(Vec::len).collect()
    }

    pub fn token(&self, field: usize, index: u32) -> &str {
        &self.vocabularies[field][index as usize]
    }

    /// Index of `token` in `field`, or 0 when unseen.
    pub fn lookup(&self, field: usize, token: &str) -> u32 {
        self.lookup[field].get(token).copied().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub schema: FieldSchema,
    pub samples: Vec<Sample>,
    pub role: Role,
}

impl Dataset {
    pub fn new(schema: FieldSchema, samples: Vec<Sample>, role: Role) -> Result<Self> {
        let sizes = schema.vocab_sizes();
        for (row, s) in samples.iter().enumerate() {
            if s.label > 1 {
                return Err(Error::BadRow {
                    row,
                    message: format!("label {} outside {{0,1}}", s.label),
                });
            }
            if !(s.p_uncalib > 0.0 && s.p_uncalib < 1.0) {
                return Err(Error::BadRow {
                    row,
                    message: format!("p_uncalib {} outside (0,1)", s.p_uncalib),
                });
            }
            if s.field_values.len() != sizes.len() {
                return Err(Error::BadRow {
                    row,
                    message: format!(
                        "{} field values for {} fields",
                        s.field_values.len(),
                        sizes.len()
                    ),
                });
            }
            for (f, (&v, &size)) in s.field_values.iter().zip(&sizes).enumerate() {
                if v as usize >= size {
                    return Err(Error::BadRow {
                        row,
                        message: format!("field {f} index {v} exceeds vocabulary size {size}"),
                    });
                }
            }
        }
        Ok(Dataset {
            schema,
            samples,
            role,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<f64> {
        self.samples.iter().map(|s| f64::from(s.label)).collect()
    }

    pub fn p_uncalib(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.p_uncalib).collect()
    }

    pub fn positives(&self) -> usize {
        self.samples.iter().filter(|s| s.label == 1).count()
    }

    pub fn subset(&self, indices: &[usize], role: Role) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            role,
        }
    }
}

/// Reads a dataset. With `schema = None` the vocabularies are built from this
/// file in order of first appearance; otherwise tokens are mapped through
/// `schema` and unseen tokens land on index 0.
pub fn load_csv(path: impl AsRef<Path>, role: Role, schema: Option<&FieldSchema>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(BufReader::new(file));
    let headers = reader.headers()?.clone();

    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let label_col = col("label")?;
    let p_col = col("p_uncalib")?;

    let header_fields: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.strip_prefix(FIELD_PREFIX).map(|n| (i, n.to_string())))
        .collect();
    if header_fields.is_empty() {
        return Err(Error::MissingColumn(format!("{FIELD_PREFIX}<name>")));
    }

    // Column position for each schema field.
    let field_cols: Vec<usize> = match schema {
        Some(s) => s
            .field_names()
            .iter()
            .map(|name| {
                header_fields
                    .iter()
                    .find(|(_, n)| n == name)
                    .map(|(i, _)| *i)
                    .ok_or_else(|| Error::MissingColumn(format!("{FIELD_PREFIX}{name}")))
            })
            .collect::<Result<_>>()?,
        None => header_fields.iter().map(|(i, _)| *i).collect(),
    };

    let mut builders: Vec<(Vec<String>, HashMap<String, u32>)> =
        vec![(Vec::new(), HashMap::new()); field_cols.len()];
    let mut samples = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let label_raw = record.get(label_col).unwrap_or("").trim();
        let label: f64 = label_raw.parse().map_err(|_| Error::BadRow {
            row,
            message: format!("non-numeric label `{label_raw}`"),
        })?;
        let label = if label == 0.0 {
            0
        } else if label == 1.0 {
            1
        } else {
            return Err(Error::BadRow {
                row,
                message: format!("label {label} outside {{0,1}}"),
            });
        };
        let p_raw = record.get(p_col).unwrap_or("").trim();
        let p: f64 = p_raw.parse().map_err(|_| Error::BadRow {
            row,
            message: format!("non-numeric p_uncalib `{p_raw}`"),
        })?;
        if !p.is_finite() {
            return Err(Error::BadRow {
                row,
                message: format!("non-finite p_uncalib `{p_raw}`"),
            });
        }
        let mut field_values = Vec::with_capacity(field_cols.len());
        for (f, &c) in field_cols.iter().enumerate() {
            let tok = record.get(c).unwrap_or("");
            let idx = match schema {
                Some(s) => s.lookup(f, tok),
                None => {
                    let (order, map) = &mut builders[f];
                    match map.get(tok) {
                        Some(&i) => i,
                        None => {
                            order.push(tok.to_string());
                            let i = order.len() as u32;
                            map.insert(tok.to_string(), i);
                            i
                        }
                    }
                }
            };
            field_values.push(idx);
        }
        samples.push(Sample {
            label,
            p_uncalib: clamp_prob(p),
            field_values,
        });
    }

    let schema = match schema {
        Some(s) => s.clone(),
        None => {
            let names = header_fields.into_iter().map(|(_, n)| n).collect();
            let vocabs = builders
                .into_iter()
                .map(|(order, _)| {
                    let mut v = vec![OOV_TOKEN.to_string()];
                    v.extend(order);
                    v
                })
                .collect();
            FieldSchema::new(names, vocabs)?
        }
    };
    Dataset::new(schema, samples, role)
}

/// Writes `dataset` as CSV. `extra` appends named numeric columns, one value
/// per sample.
pub fn write_csv(dataset: &Dataset, path: impl AsRef<Path>, extra: &[(&str, &[f64])]) -> Result<()> {
    let path = path.as_ref();
    for (name, col) in extra {
        if col.len() != dataset.len() {
            return Err(Error::invalid(format!(
                "extra column `{name}` has {} values for {} samples",
                col.len(),
                dataset.len()
            )));
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let mut header = vec!["label".to_string(), "p_uncalib".to_string()];
    header.extend(
        dataset
            .schema
            .field_names()
            .iter()
            .map(|n| format!("{FIELD_PREFIX}{n}")),
    );
    header.extend(extra.iter().map(|(n, _)| n.to_string()));
    w.write_record(&header)?;
    for (row, s) in dataset.samples.iter().enumerate() {
        let mut rec = Vec::with_capacity(header.len());
        rec.push(s.label.to_string());
        rec.push(format_f64(s.p_uncalib));
        for (f, &v) in s.field_values.iter().enumerate() {
            rec.push(dataset.schema.token(f, v).to_string());
        }
        for (_, col) in extra {
            rec.push(format_f64(col[row]));
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Shortest representation that parses back to the same `f64`.
pub(crate) fn format_f64(x: f64) -> String {
    format!("{x:?}")
}

/// Reads one numeric column by header name.
pub fn read_column(path: impl AsRef<Path>, name: &str) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(BufReader::new(file));
    let c = reader
        .headers()?
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::MissingColumn(name.to_string()))?;
    let mut out = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        let raw = rec.get(c).unwrap_or("").trim();
        out.push(raw.parse().map_err(|_| Error::BadRow {
            row,
            message: format!("non-numeric `{name}` value `{raw}`"),
        })?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BucketMode {
    #[default]
    Quantile,
    EqualWidth,
}

/// Interior edges partitioning (0,1) into `edges.len() + 1` half-open
/// buckets `[edge_{i-1}, edge_i)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketSpec {
    pub edges: Vec<f64>,
    pub mode: BucketMode,
}

impl BucketSpec {
    pub fn new(edges: Vec<f64>, mode: BucketMode) -> Result<Self> {
        if edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("bucket edges must be strictly increasing"));
        }
        if edges.first().is_some_and(|&e| e <= 0.0) || edges.last().is_some_and(|&e| e >= 1.0) {
            return Err(Error::invalid("bucket edges must lie inside (0,1)"));
        }
        Ok(BucketSpec { edges, mode })
    }

    /// Fits `k` buckets to `scores`. Quantile edges that coincide, or that
    /// would leave the lowest bucket empty, are dropped, so degenerate score
    /// distributions yield fewer than `k` buckets.
    pub fn fit(scores: &[f64], k: usize, mode: BucketMode) -> Result<Self> {
        if k < 2 {
            return Err(Error::invalid(format!("bucket count must be at least 2, got {k}")));
        }
        let edges = match mode {
            BucketMode::EqualWidth => (1..k).map(|i| i as f64 / k as f64).collect(),
            BucketMode::Quantile => {
                if scores.is_empty() {
                    return Err(Error::invalid("cannot fit quantile buckets on no scores"));
                }
                let mut sorted: Vec<f64> = scores.iter().map(|&p| clamp_prob(p)).collect();
                sorted.sort_by(f64::total_cmp);
                let lo = sorted[0];
                let mut edges: Vec<f64> = Vec::with_capacity(k - 1);
                for i in 1..k {
                    let e = quantile_sorted(&sorted, i as f64 / k as f64);
                    if e > lo && edges.last().is_none_or(|&last| e > last) {
                        edges.push(e);
                    }
                }
                edges
            }
        };
        BucketSpec::new(edges, mode)
    }

    pub fn bucket_count(&self) -> usize {
        self.edges.len() + 1
    }

    /// Index of the bucket containing `p`; a value equal to an edge belongs
    /// to the bucket on its right.
    pub fn bucket_of(&self, p: f64) -> usize {
        self.edges.partition_point(|&e| e <= p)
    }
}

pub fn fit_buckets(dataset: &Dataset, k: usize, mode: BucketMode) -> Result<BucketSpec> {
    if dataset.is_empty() && mode == BucketMode::Quantile {
        return Err(Error::invalid("cannot fit buckets on an empty dataset"));
    }
    BucketSpec::fit(&dataset.p_uncalib(), k, mode)
}

/// Linear-interpolation empirical quantile of an ascending slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Sizes of a split of `n` items by `fractions`; the last part absorbs rounding.
fn split_sizes(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    if fractions.iter().any(|&f| !(f >= 0.0) || !f.is_finite()) {
        return Err(Error::invalid("split fractions must be non-negative"));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split fractions sum to {total}, not 1")));
    }
    let a = (fractions[0] * n as f64).round() as usize;
    let b = ((fractions[1] * n as f64).round() as usize).min(n - a.min(n));
    let a = a.min(n);
    let sizes = [a, b, n - a - b];
    if sizes.contains(&0) {
        return Err(Error::invalid(format!(
            "split of {n} samples by {fractions:?} leaves an empty part"
        )));
    }
    Ok(sizes)
}

/// Seeded shuffle of `0..n` cut into train/validation/test index lists.
pub fn split_indices(n: usize, fractions: [f64; 3], seed: u64) -> Result<[Vec<usize>; 3]> {
    let sizes = split_sizes(n, fractions)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = order.split_off(sizes[0] + sizes[1]);
    let val = order.split_off(sizes[0]);
    Ok([order, val, test])
}

pub fn split(dataset: &Dataset, fractions: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let [tr, va, te] = split_indices(dataset.len(), fractions, seed)?;
    Ok((
        dataset.subset(&tr, Role::Train),
        dataset.subset(&va, Role::Validation),
        dataset.subset(&te, Role::Test),
    ))
}
