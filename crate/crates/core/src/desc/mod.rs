//! DESC: per-field shape calibrators mixing a fixed family of monotone basis
//! functions, combined by a learned global attention Ψ and multiplied by a
//! field-aware value correction V.
//!
//! For a sample with score `t` and field embeddings `e_1..e_n`:
//!
//! * `α_i = softmax(MLP([b_t, e_i, X(e_i)]))` allocates field `i` over the
//!   basis family, where `b_t` is the score-bucket embedding and `X` is
//!   self-attention over the other fields;
//! * `S_i = Σ_j α_i^j B_j(t)`;
//! * `h = MLP1([b_t, e_1..e_n])`, `V = exp(clamp(MLP2(h), ±4))`,
//!   `Ψ = softmax(MLP3(h))`;
//! * `p = clamp(V · Σ_i Ψ_i S_i, ε, 1-ε)`.
//!
//! The shape and value calibrators share the field embedding tables.

mod config;
mod model;
mod train;

pub use config::{DescConfig, Variant};
pub use model::{
    augment_embedding, field_table, Arch, DescModel, Trace, ALLOC_HIDDEN, ALLOC_OUT, BASIS_PARAMS, BUCKET_TABLE,
    EMBEDDING_INIT, PSI_HEAD, VALUE_HEAD, VALUE_LOGIT_CLAMP, VALUE_TRUNK,
};
pub use train::{ablate, fit, loss, train, TrainReport};

use crate::basis::BasisFamily;
use crate::data::{fit_buckets, Dataset};
use crate::diffcore::{grad_check, GradCheckConfig, GradCheckReport, Tape, Var};
use crate::error::Result;
use crate::synthgen::{generate, DistortionSpec, GenConfig};

/// Records the mean training loss of `rows` of `data` on `tape`; used by the
/// gradient checker.
pub fn loss_on_tape(model: &DescModel, tape: &mut Tape, data: &Dataset, rows: &[usize]) -> Result<Var> {
    let prep = model.prepare(data)?;
    let g = model.build(tape, &prep, rows)?;
    let labels: Vec<f64> = rows.iter().map(|&r| prep.labels[r]).collect();
    tape.bce(g.p, &labels)
}

/// Nine-function family (three of each kind) used for gradient checks.
pub fn reduced_basis(trainable: bool) -> BasisFamily {
    BasisFamily::new(vec![0.7, 1.8, 3.0], vec![0.5, 2.0, 6.0], vec![0.5, 1.0, 2.5], trainable)
        .expect("valid reduced family")
}

/// Gradient check of the full model with trainable basis hyperparameters on
/// a 64-sample, three-field synthetic batch with `d = 4`.
pub fn micro_gradcheck(seed: u64, tolerance: f64, check: &GradCheckConfig) -> Result<GradCheckReport> {
    let gen = GenConfig {
        cardinalities: vec![5, 4, 3],
        base_logit: -1.0,
        field_effect_scale: 0.5,
        sample_count: 64,
        seed,
    };
    let data = generate(&gen, &DistortionSpec::round_robin("z0", 5, &[0.5, 2.0], &[0.6, 1.6]))?.dataset;
    let config = DescConfig {
        embedding_dim: 4,
        alloc_mlp_hidden: 6,
        value_mlp1_hidden: 5,
        bucket_count: 5,
        seed,
        basis: reduced_basis(true),
        ..DescConfig::default()
    };
    let buckets = fit_buckets(&data, config.bucket_count, config.bucket_mode)?;
    let model = DescModel::new(data.schema.clone(), buckets, config)?;
    let rows: Vec<usize> = (0..data.len()).collect();
    grad_check(|tape| loss_on_tape(&model, tape, &data, &rows), &model.store, tolerance, check)
}
