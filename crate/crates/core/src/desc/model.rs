use ndarray::Axis;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{DescConfig, Variant};
use crate::basis::BasisFamily;
use crate::data::{clamp_prob, BucketSpec, Dataset, FieldSchema, Sample};
use crate::diffcore::{softmax, Activation, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Bound of the uniform embedding initializer.
pub const EMBEDDING_INIT: f64 = 0.05;
/// Pre-activation clamp of the value head: `V ∈ [e^-4, e^4]`.
pub const VALUE_LOGIT_CLAMP: f64 = 4.0;

pub const BUCKET_TABLE: &str = "emb.bucket";
pub const ALLOC_HIDDEN: &str = "alloc.l1";
pub const ALLOC_OUT: &str = "alloc.l2";
pub const VALUE_TRUNK: &str = "value.mlp1";
pub const VALUE_HEAD: &str = "value.mlp2";
pub const PSI_HEAD: &str = "value.mlp3";
pub const BASIS_PARAMS: &str = "basis.theta";

pub fn field_table(i: usize) -> String {
    format!("emb.field{i}")
}

/// Which sub-networks a configuration uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Arch {
    pub shape: bool,
    pub value_head: bool,
    pub learned_psi: bool,
    pub trunk: bool,
    pub bucket: bool,
    pub augmentation: bool,
}

impl Arch {
    pub fn of(config: &DescConfig, n_fields: usize) -> Arch {
        let v = config.variant;
        let shape = v != Variant::NoShape;
        let value_head = v != Variant::NoValue;
        let learned_psi = shape && v != Variant::MeanPoolEnsemble;
        Arch {
            shape,
            value_head,
            learned_psi,
            trunk: value_head || learned_psi,
            bucket: v != Variant::NoBucketFeature,
            augmentation: shape && config.use_augmentation && v != Variant::NoAugmentation && n_fields >= 2,
        }
    }
}

/// Columnar view of a dataset in model coordinates.
#[derive(Clone, Debug)]
pub(crate) struct Prepared {
    pub fields: Vec<Vec<usize>>,
    pub buckets: Vec<usize>,
    pub t: Vec<f64>,
    pub labels: Vec<f64>,
    /// `len × m` basis values when the family is frozen.
    pub basis: Option<Tensor>,
}

impl Prepared {
    pub fn len(&self) -> usize {
        self.t.len()
    }
}

/// Handles into one recorded forward pass.
pub(crate) struct Graph {
    pub p: Var,
    pub alphas: Vec<Var>,
    pub shapes: Vec<Var>,
    pub hidden: Option<Var>,
    pub value: Option<Var>,
    pub psi: Option<Var>,
}

/// Every intermediate of the forward pass for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    /// Shape-allocation weights α_i, one vector of length m per field.
    pub alphas: Vec<Vec<f64>>,
    /// Per-field shape outputs S_i(x).
    pub shapes: Vec<f64>,
    /// Global Shape Attention Ψ.
    pub psi: Vec<f64>,
    /// Ensembled shape score S(x), when the shape calibrator is present.
    pub shape: Option<f64>,
    pub hidden: Option<Vec<f64>>,
    /// Multiplicative value correction V(x), when the value head is present.
    pub value: Option<f64>,
    pub p_calib: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DescModel {
    pub config: DescConfig,
    pub schema: FieldSchema,
    pub buckets: BucketSpec,
    /// Current basis hyperparameters (kept in sync with the store when trainable).
    pub basis: BasisFamily,
    pub store: ParamStore,
}

impl DescModel {
    /// Freshly initialized model. Embeddings are uniform(±0.05), dense
    /// weights Glorot-uniform and biases zero, all drawn from `config.seed`.
    pub fn new(schema: FieldSchema, buckets: BucketSpec, config: DescConfig) -> Result<Self> {
        config.validate()?;
        let n = schema.field_count();
        let d = config.embedding_dim;
        let arch = Arch::of(&config, n);
        let m = config.basis.len();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();

        for i in 0..n {
            store.add_uniform(field_table(i), schema.vocab_size(i), d, EMBEDDING_INIT, &mut rng)?;
        }
        if arch.bucket {
            store.add_uniform(BUCKET_TABLE, buckets.bucket_count(), d, EMBEDDING_INIT, &mut rng)?;
        }
        let mut dense = |store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize| -> Result<()> {
            store.add_glorot(format!("{name}.w"), fan_in, fan_out, &mut rng)?;
            store.add_zeros(format!("{name}.b"), 1, fan_out)?;
            Ok(())
        };
        if arch.shape {
            let width = alloc_input_width(&arch, d);
            dense(&mut store, ALLOC_HIDDEN, width, config.alloc_mlp_hidden)?;
            dense(&mut store, ALLOC_OUT, config.alloc_mlp_hidden, m)?;
        }
        let hidden = config.value_mlp1_hidden;
        if arch.trunk {
            let width = (n + usize::from(arch.bucket)) * d;
            dense(&mut store, VALUE_TRUNK, width, hidden)?;
        }
        if arch.value_head {
            dense(&mut store, VALUE_HEAD, hidden, 1)?;
        }
        if arch.learned_psi {
            dense(&mut store, PSI_HEAD, hidden, n)?;
        }
        if arch.shape && config.basis.trainable {
            store.add(
                BASIS_PARAMS,
                Tensor::from_shape_vec((1, m), config.basis.params()).expect("basis row"),
            )?;
        }
        Ok(DescModel {
            basis: config.basis.clone(),
            config,
            schema,
            buckets,
            store,
        })
    }

    pub fn arch(&self) -> Arch {
        Arch::of(&self.config, self.field_count())
    }

    pub fn field_count(&self) -> usize {
        self.schema.field_count()
    }

    /// Input width of the allocation MLP.
    pub fn alloc_input_width(&self) -> usize {
        alloc_input_width(&self.arch(), self.config.embedding_dim)
    }

    pub(crate) fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        if ds.schema != self.schema {
            return Err(Error::Schema(
                "dataset vocabularies do not match the model's".into(),
            ));
        }
        Ok(())
    }

    fn check_sample(&self, s: &Sample) -> Result<()> {
        if s.field_values.len() != self.field_count() {
            return Err(Error::Schema(format!(
                "sample has {} field values, model expects {}",
                s.field_values.len(),
                self.field_count()
            )));
        }
        for (i, &v) in s.field_values.iter().enumerate() {
            if v as usize >= self.schema.vocab_size(i) {
                return Err(Error::Schema(format!("field {i} index {v} out of vocabulary")));
            }
        }
        Ok(())
    }

    pub(crate) fn prepare_samples<'a>(&self, samples: impl Iterator<Item = &'a Sample>) -> Prepared {
        let n = self.field_count();
        let mut prep = Prepared {
            fields: vec![Vec::new(); n],
            buckets: Vec::new(),
            t: Vec::new(),
            labels: Vec::new(),
            basis: None,
        };
        for s in samples {
            let t = clamp_prob(s.p_uncalib);
            for (i, &v) in s.field_values.iter().enumerate() {
                prep.fields[i].push(v as usize);
            }
            prep.buckets.push(self.buckets.bucket_of(t));
            prep.t.push(t);
            prep.labels.push(f64::from(s.label));
        }
        if self.arch().shape && !self.config.basis.trainable {
            let m = self.basis.len();
            let mut vals = Tensor::zeros((prep.t.len(), m));
            for (r, &t) in prep.t.iter().enumerate() {
                self.basis
                    .eval_into(t, vals.row_mut(r).into_slice().expect("row slice"));
            }
            prep.basis = Some(vals);
        }
        prep
    }

    pub(crate) fn prepare(&self, ds: &Dataset) -> Result<Prepared> {
        self.check_dataset(ds)?;
        Ok(self.prepare_samples(ds.samples.iter()))
    }

    /// Records the forward pass for `rows` of `prep` on `tape`.
    pub(crate) fn build(&self, tape: &mut Tape, prep: &Prepared, rows: &[usize]) -> Result<Graph> {
        let arch = self.arch();
        let n = self.field_count();
        let pick = |col: &[usize]| -> Vec<usize> { rows.iter().map(|&r| col[r]).collect() };

        let mut embs = Vec::with_capacity(n);
        for i in 0..n {
            let table = tape.param_named(&field_table(i))?;
            embs.push(tape.gather(table, &pick(&prep.fields[i]))?);
        }
        let bucket = if arch.bucket {
            let table = tape.param_named(BUCKET_TABLE)?;
            Some(tape.gather(table, &pick(&prep.buckets))?)
        } else {
            None
        };

        let mut alphas = Vec::new();
        let mut shapes = Vec::new();
        if arch.shape {
            let basis_vals = if self.config.basis.trainable {
                let theta = tape.param_named(BASIS_PARAMS)?;
                let t: Vec<f64> = rows.iter().map(|&r| prep.t[r]).collect();
                tape.basis(&t, theta, &self.basis)?
            } else {
                let all = prep.basis.as_ref().expect("frozen basis values are prepared");
                tape.constant(all.select(Axis(0), rows))
            };
            for i in 0..n {
                let mut parts = Vec::with_capacity(3);
                parts.extend(bucket);
                parts.push(embs[i]);
                if arch.augmentation {
                    parts.push(augment_on_tape(tape, i, &embs, self.config.embedding_dim)?);
                }
                let input = tape.concat(&parts)?;
                let h = tape.dense(ALLOC_HIDDEN, input, Activation::Relu)?;
                let logits = tape.dense(ALLOC_OUT, h, Activation::Identity)?;
                let alpha = tape.softmax(logits);
                let weighted = tape.mul(alpha, basis_vals)?;
                alphas.push(alpha);
                shapes.push(tape.row_sum(weighted));
            }
        }

        let hidden = if arch.trunk {
            let mut parts = Vec::with_capacity(n + 1);
            parts.extend(bucket);
            parts.extend(&embs);
            let input = tape.concat(&parts)?;
            Some(tape.dense(VALUE_TRUNK, input, Activation::Relu)?)
        } else {
            None
        };
        let raw = match (arch.value_head, hidden) {
            (true, Some(h)) => Some(tape.dense(VALUE_HEAD, h, Activation::Identity)?),
            _ => None,
        };
        let psi = match (arch.learned_psi, hidden) {
            (true, Some(h)) => {
                let logits = tape.dense(PSI_HEAD, h, Activation::Identity)?;
                Some(tape.softmax(logits))
            }
            _ => None,
        };

        let eps = self.config.loss_epsilon;
        let (score, value) = if !arch.shape {
            let raw = raw.expect("value head present without shape calibrator");
            (tape.sigmoid(raw), None)
        } else {
            let stacked = tape.concat(&shapes)?;
            let s = match psi {
                Some(psi) => {
                    let w = tape.mul(stacked, psi)?;
                    tape.row_sum(w)
                }
                None => {
                    let sum = tape.row_sum(stacked);
                    tape.scale(sum, 1.0 / n as f64)
                }
            };
            match raw {
                Some(raw) => {
                    let clamped = tape.clamp(raw, -VALUE_LOGIT_CLAMP, VALUE_LOGIT_CLAMP);
                    let v = tape.exp(clamped);
                    (tape.mul(s, v)?, Some(v))
                }
                None => (s, None),
            }
        };
        let p = tape.clamp(score, eps, 1.0 - eps);
        Ok(Graph {
            p,
            alphas,
            shapes,
            hidden,
            value,
            psi,
        })
    }

    /// Calibrated probabilities for `rows` of `prep`.
    pub(crate) fn predict_prepared(&self, prep: &Prepared) -> Result<Vec<f64>> {
        const CHUNK: usize = 8192;
        let mut out = Vec::with_capacity(prep.len());
        let all: Vec<usize> = (0..prep.len()).collect();
        for rows in all.chunks(CHUNK) {
            let mut tape = Tape::new(&self.store);
            let g = self.build(&mut tape, prep, rows)?;
            let p = tape.value(g.p);
            if let Some(bad) = p.iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("calibrated score {bad}")));
            }
            out.extend(p.iter().copied());
        }
        Ok(out)
    }

    /// Calibrated probability for every sample of `ds`.
    pub fn predict(&self, ds: &Dataset) -> Result<Vec<f64>> {
        let prep = self.prepare(ds)?;
        self.predict_prepared(&prep)
    }

    /// Forward pass for one sample, keeping every intermediate.
    pub fn trace(&self, sample: &Sample) -> Result<Trace> {
        self.check_sample(sample)?;
        let prep = self.prepare_samples(std::iter::once(sample));
        let mut tape = Tape::new(&self.store);
        let g = self.build(&mut tape, &prep, &[0])?;
        let row = |v: Var| tape.value(v).row(0).to_vec();
        let n = self.field_count();
        let shapes: Vec<f64> = g.shapes.iter().map(|&v| tape.value(v)[[0, 0]]).collect();
        let psi = match g.psi {
            Some(v) => row(v),
            None => vec![1.0 / n as f64; n],
        };
        let shape = (!shapes.is_empty()).then(|| shapes.iter().zip(&psi).map(|(s, w)| s * w).sum());
        let p_calib = tape.value(g.p)[[0, 0]];
        if !p_calib.is_finite() {
            return Err(Error::NonFinite(format!("calibrated score {p_calib}")));
        }
        Ok(Trace {
            alphas: g.alphas.iter().map(|&v| row(v)).collect(),
            shapes,
            psi,
            shape,
            hidden: g.hidden.map(row),
            value: g.value.map(|v| tape.value(v)[[0, 0]]),
            p_calib,
        })
    }

    /// Rows of the field embedding tables selected by `sample`.
    pub fn field_embeddings(&self, sample: &Sample) -> Result<Vec<Vec<f64>>> {
        self.check_sample(sample)?;
        sample
            .field_values
            .iter()
            .enumerate()
            .map(|(i, &v)| Ok(self.store.value(&field_table(i))?.row(v as usize).to_vec()))
            .collect()
    }

    /// Self-attention summary of the other fields' embeddings for field `i`
    /// of `sample`; `None` with a single field.
    pub fn augment_embedding(&self, field: usize, sample: &Sample) -> Result<Option<Vec<f64>>> {
        let embs = self.field_embeddings(sample)?;
        Ok(augment_embedding(field, &embs))
    }

    /// α_i: allocation of field `i` over the basis family.
    pub fn shape_attention(&self, field: usize, sample: &Sample) -> Result<Vec<f64>> {
        let trace = self.trace(sample)?;
        trace
            .alphas
            .get(field)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("no shape allocation for field {field}")))
    }

    /// S_i(x): the single-field shape calibrator output.
    pub fn sfsc_forward(&self, field: usize, sample: &Sample) -> Result<f64> {
        let trace = self.trace(sample)?;
        trace
            .shapes
            .get(field)
            .copied()
            .ok_or_else(|| Error::invalid(format!("no shape output for field {field}")))
    }

    /// `(hiddenLayer, V(x))`.
    pub fn value_forward(&self, sample: &Sample) -> Result<(Vec<f64>, f64)> {
        let trace = self.trace(sample)?;
        match (trace.hidden, trace.value) {
            (Some(h), Some(v)) => Ok((h, v)),
            _ => Err(Error::invalid("this variant has no value calibrator")),
        }
    }

    /// Ψ for a given hidden layer.
    pub fn global_shape_attention(&self, hidden: &[f64]) -> Result<Vec<f64>> {
        let n = self.field_count();
        if !self.arch().learned_psi {
            return Ok(vec![1.0 / n as f64; n]);
        }
        let mut tape = Tape::new(&self.store);
        let h = tape.constant(
            Tensor::from_shape_vec((1, hidden.len()), hidden.to_vec()).expect("hidden row"),
        );
        let logits = tape.dense(PSI_HEAD, h, Activation::Identity)?;
        Ok(softmax(tape.value(logits).row(0).as_slice().expect("contiguous row")))
    }

    /// Calibrated probability of one sample.
    pub fn forward(&self, sample: &Sample) -> Result<f64> {
        Ok(self.trace(sample)?.p_calib)
    }
}

fn alloc_input_width(arch: &Arch, d: usize) -> usize {
    d * (1 + usize::from(arch.bucket) + usize::from(arch.augmentation))
}

/// Self-attention of field `i` over the other fields:
/// `Σ_{j≠i} softmax_j(e_i·e_j/√d) e_j`.
pub fn augment_embedding(field: usize, embeddings: &[Vec<f64>]) -> Option<Vec<f64>> {
    let n = embeddings.len();
    if n < 2 {
        return None;
    }
    let d = embeddings[field].len();
    let scale = 1.0 / (d as f64).sqrt();
    let others: Vec<usize> = (0..n).filter(|&j| j != field).collect();
    let logits: Vec<f64> = others
        .iter()
        .map(|&j| {
            embeddings[field]
                .iter()
                .zip(&embeddings[j])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                * scale
        })
        .collect();
    let w = softmax(&logits);
    let mut out = vec![0.0; d];
    for (k, &j) in others.iter().enumerate() {
        for (o, e) in out.iter_mut().zip(&embeddings[j]) {
            *o += w[k] * e;
        }
    }
    Some(out)
}

fn augment_on_tape(tape: &mut Tape, field: usize, embs: &[Var], d: usize) -> Result<Var> {
    let scale = 1.0 / (d as f64).sqrt();
    let others: Vec<usize> = (0..embs.len()).filter(|&j| j != field).collect();
    let mut logits = Vec::with_capacity(others.len());
    for &j in &others {
        let dot = tape.row_dot(embs[field], embs[j])?;
        logits.push(tape.scale(dot, scale));
    }
    let stacked = tape.concat(&logits)?;
    let w = tape.softmax(stacked);
    let mut acc: Option<Var> = None;
    for (k, &j) in others.iter().enumerate() {
        let wk = tape.column(w, k)?;
        let term = tape.scale_rows(embs[j], wk)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("at least one other field"))
}
