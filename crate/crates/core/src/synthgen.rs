//! Synthetic impressions with known click probabilities and controlled
//! per-value miscalibration.
//!
//! True probabilities are `sigmoid(base_logit + Σ effect(field, value))`.
//! The uncalibrated score distorts them in odds space for the configured
//! field values: `odds' = value_bias · odds^shape_exponent`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::basis::{logit, sigmoid};
use crate::data::{clamp_prob, write_csv, Dataset, FieldSchema, Role, Sample};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricsConfig, MetricsReport};

/// Column carrying the true probability in generated CSVs.
pub const TRUE_PROB_COLUMN: &str = "p_true";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    /// Number of distinct values per field.
    pub cardinalities: Vec<usize>,
    pub base_logit: f64,
    pub field_effect_scale: f64,
    pub sample_count: usize,
    pub seed: u64,
}

impl GenConfig {
    pub fn n_fields(&self) -> usize {
        self.cardinalities.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.cardinalities.is_empty() || self.cardinalities.contains(&0) {
            return Err(Error::invalid("every field needs at least one value"));
        }
        if self.sample_count == 0 {
            return Err(Error::invalid("sample_count must be positive"));
        }
        if !self.base_logit.is_finite() || !(self.field_effect_scale >= 0.0) {
            return Err(Error::invalid("base_logit must be finite and field_effect_scale non-negative"));
        }
        Ok(())
    }

    pub fn field_name(i: usize) -> String {
        format!("z{i}")
    }

    pub fn value_token(k: usize) -> String {
        format!("v{k}")
    }

    /// Schema of generated data: fields `z0, z1, …`, values `v0, v1, …`
    /// stored at vocabulary indices `1, 2, …`.
    pub fn schema(&self) -> Result<FieldSchema> {
        FieldSchema::new(
            (0..self.n_fields()).map(Self::field_name).collect(),
            self.cardinalities
                .iter()
                .map(|&k| (0..k).map(Self::value_token).collect())
                .collect(),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distortion {
    pub field: String,
    pub value: String,
    pub value_bias: f64,
    pub shape_exponent: f64,
}

impl Distortion {
    /// Maps a true probability to its distorted score.
    pub fn apply(&self, p: f64) -> f64 {
        sigmoid(self.value_bias.ln() + self.shape_exponent * logit(p))
    }
}

/// Per-(field, value) distortions; unlisted values are left undistorted.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DistortionSpec {
    pub assignments: Vec<Distortion>,
}

impl DistortionSpec {
    pub fn identity() -> Self {
        Self::default()
    }

    /// Cycles through every `(bias, exponent)` pair from `biases × exponents`
    /// over the values `v0, v1, …` of `field`.
    pub fn round_robin(field: &str, cardinality: usize, biases: &[f64], exponents: &[f64]) -> Self {
        let combos: Vec<(f64, f64)> = biases
            .iter()
            .flat_map(|&b| exponents.iter().map(move |&e| (b, e)))
            .collect();
        DistortionSpec {
            assignments: (0..cardinality)
                .map(|k| {
                    let (value_bias, shape_exponent) = combos[k % combos.len()];
                    Distortion {
                        field: field.to_string(),
                        value: GenConfig::value_token(k),
                        value_bias,
                        shape_exponent,
                    }
                })
                .collect(),
        }
    }

    /// Resolves every assignment to `[field][value index]` lookups.
    fn resolve(&self, schema: &FieldSchema) -> Result<Vec<Vec<Option<Distortion>>>> {
        let mut table: Vec<Vec<Option<Distortion>>> = schema
            .vocab_sizes()
            .into_iter()
            .map(|k| vec![None; k])
            .collect();
        for d in &self.assignments {
            if !(d.value_bias > 0.0) || !(d.shape_exponent > 0.0) {
                return Err(Error::invalid(format!(
                    "distortion of {}={} needs positive bias and exponent",
                    d.field, d.value
                )));
            }
            let f = schema
                .field_index(&d.field)
                .ok_or_else(|| Error::invalid(format!("distortion names unknown field `{}`", d.field)))?;
            let v = schema.lookup(f, &d.value);
            if v == 0 {
                return Err(Error::invalid(format!(
                    "distortion names unknown value `{}` of field `{}`",
                    d.value, d.field
                )));
            }
            table[f][v as usize] = Some(d.clone());
        }
        Ok(table)
    }
}

/// Sidecar metadata written next to a generated CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenMetadata {
    pub seed: u64,
    pub config: GenConfig,
    pub field_names: Vec<String>,
    /// `effects[field][k]` is the logit effect of value `v{k}`.
    pub effects: Vec<Vec<f64>>,
    pub distortion: DistortionSpec,
    pub true_probs_column: String,
}

#[derive(Clone, Debug)]
pub struct Generated {
    pub dataset: Dataset,
    pub true_probs: Vec<f64>,
    pub metadata: GenMetadata,
}

pub fn generate(config: &GenConfig, distortion: &DistortionSpec) -> Result<Generated> {
    config.validate()?;
    let schema = config.schema()?;
    let table = distortion.resolve(&schema)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let effects: Vec<Vec<f64>> = config
        .cardinalities
        .iter()
        .map(|&k| {
            (0..k)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    config.field_effect_scale * z
                })
                .collect()
        })
        .collect();

    let mut samples = Vec::with_capacity(config.sample_count);
    let mut true_probs = Vec::with_capacity(config.sample_count);
    for _ in 0..config.sample_count {
        let mut z = config.base_logit;
        let mut field_values = Vec::with_capacity(config.n_fields());
        for (f, &k) in config.cardinalities.iter().enumerate() {
            let v = rng.random_range(0..k);
            z += effects[f][v];
            field_values.push(v as u32 + 1);
        }
        let p_true = sigmoid(z);
        let label = u8::from(rng.random::<f64>() < p_true);
        let mut p = p_true;
        for (f, &v) in field_values.iter().enumerate() {
            if let Some(d) = &table[f][v as usize] {
                p = d.apply(p);
            }
        }
        samples.push(Sample {
            label,
            p_uncalib: clamp_prob(p),
            field_values,
        });
        true_probs.push(p_true);
    }

    let metadata = GenMetadata {
        seed: config.seed,
        config: config.clone(),
        field_names: schema.field_names().to_vec(),
        effects,
        distortion: distortion.clone(),
        true_probs_column: TRUE_PROB_COLUMN.to_string(),
    };
    Ok(Generated {
        dataset: Dataset::new(schema, samples, Role::Train)?,
        true_probs,
        metadata,
    })
}

/// Metrics of the true probabilities: the noise floor of `dataset`.
pub fn oracle_report(dataset: &Dataset, true_probs: &[f64], cfg: &MetricsConfig) -> Result<MetricsReport> {
    if dataset.len() != true_probs.len() {
        return Err(Error::invalid(format!(
            "{} true probabilities for {} samples",
            true_probs.len(),
            dataset.len()
        )));
    }
    evaluate(dataset, true_probs, cfg)
}

/// Writes `<stem>.csv` (with the true-probability column).
pub fn write_dataset(dataset: &Dataset, true_probs: &[f64], path: impl AsRef<Path>) -> Result<()> {
    write_csv(dataset, path, &[(TRUE_PROB_COLUMN, true_probs)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::pcoc;

    fn cfg(n: usize, seed: u64) -> GenConfig {
        GenConfig {
            cardinalities: vec![4, 3],
            base_logit: -1.0,
            field_effect_scale: 0.5,
            sample_count: n,
            seed,
        }
    }

    #[test]
    fn identity_distortion_keeps_true_probs() {
        let g = generate(&cfg(500, 1), &DistortionSpec::identity()).unwrap();
        for (s, &p) in g.dataset.samples.iter().zip(&g.true_probs) {
            assert_eq!(s.p_uncalib, clamp_prob(p));
        }
    }

    #[test]
    fn odds_arithmetic() {
        let d = |b, e| Distortion {
            field: "z0".into(),
            value: "v0".into(),
            value_bias: b,
            shape_exponent: e,
        };
        assert!((d(2.0, 1.0).apply(0.5) - 2.0 / 3.0).abs() < 1e-15);
        assert!((d(1.0, 2.0).apply(0.5) - 0.5).abs() < 1e-15);
        // odds 1/4 squared, doubled: 1/8 → p = 1/9
        assert!((d(2.0, 2.0).apply(0.2) - 1.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn deterministic_under_seed() {
        let spec = DistortionSpec::round_robin("z0", 4, &[0.5, 2.0], &[0.6, 1.6]);
        let a = generate(&cfg(300, 5), &spec).unwrap();
        let b = generate(&cfg(300, 5), &spec).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.true_probs, b.true_probs);
        assert_eq!(a.metadata, b.metadata);
        let c = generate(&cfg(300, 6), &spec).unwrap();
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn rejects_unknown_targets() {
        let mut spec = DistortionSpec::round_robin("z0", 1, &[2.0], &[1.0]);
        spec.assignments[0].field = "nope".into();
        assert!(generate(&cfg(10, 1), &spec).is_err());
        let spec = DistortionSpec::round_robin("z0", 9, &[2.0], &[1.0]);
        assert!(generate(&cfg(10, 1), &spec).is_err());
    }

    #[test]
    fn round_robin_cycles_all_combinations() {
        let spec = DistortionSpec::round_robin("z0", 5, &[0.5, 2.0], &[0.6, 1.6]);
        let pairs: Vec<(f64, f64)> = spec
            .assignments
            .iter()
            .map(|d| (d.value_bias, d.shape_exponent))
            .collect();
        assert_eq!(pairs, vec![(0.5, 0.6), (0.5, 1.6), (2.0, 0.6), (2.0, 1.6), (0.5, 0.6)]);
    }

    #[test]
    fn value_bias_inflates_pcoc() {
        let c = cfg(20_000, 3);
        let spec = DistortionSpec {
            assignments: (0..4)
                .map(|k| Distortion {
                    field: "z0".into(),
                    value: GenConfig::value_token(k),
                    value_bias: 2.0,
                    shape_exponent: 1.0,
                })
                .collect(),
        };
        let g = generate(&c, &spec).unwrap();
        let y = g.dataset.labels();
        assert!(pcoc(&y, &g.dataset.p_uncalib()).unwrap() > 1.2);
        let oracle = oracle_report(&g.dataset, &g.true_probs, &MetricsConfig::default()).unwrap();
        assert!((oracle.pcoc.unwrap() - 1.0).abs() < 0.05);
        assert!(oracle_report(&g.dataset, &g.true_probs[1..], &MetricsConfig::default()).is_err());
    }
}
