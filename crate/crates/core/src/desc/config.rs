use serde::{Deserialize, Serialize};

use crate::basis::BasisFamily;
use crate::data::BucketMode;
use crate::error::{Error, Result};

/// Architecture variants used for ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// Score is `sigmoid(MLP2(hidden))`; no basis mixture.
    NoShape,
    /// Score is the shape ensemble alone; MLP1/MLP3 only produce Ψ.
    NoValue,
    /// Ψ fixed at `1/n`.
    MeanPoolEnsemble,
    /// Bucket embedding dropped from the allocation and value inputs.
    NoBucketFeature,
    /// Allocation input without the self-attention embedding.
    NoAugmentation,
}

impl Variant {
    pub const ABLATIONS: [Variant; 5] = [
        Variant::NoShape,
        Variant::NoValue,
        Variant::MeanPoolEnsemble,
        Variant::NoBucketFeature,
        Variant::NoAugmentation,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "DESC",
            Variant::NoShape => "w/o Shape Calibrator",
            Variant::NoValue => "w/o Value Calibrator",
            Variant::MeanPoolEnsemble => "w/o Multi-Field Shape Ensemble",
            Variant::NoBucketFeature => "w/o pCTR Bucket Feature",
            Variant::NoAugmentation => "w/o Embedding Augmentation",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoShape => "no_shape",
            Variant::NoValue => "no_value",
            Variant::MeanPoolEnsemble => "mean_pool_ensemble",
            Variant::NoBucketFeature => "no_bucket_feature",
            Variant::NoAugmentation => "no_augmentation",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        [Variant::Full]
            .into_iter()
            .chain(Variant::ABLATIONS)
            .find(|v| v.key() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DescConfig {
    pub embedding_dim: usize,
    pub bucket_count: usize,
    pub bucket_mode: BucketMode,
    pub alloc_mlp_hidden: usize,
    pub value_mlp1_hidden: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub use_augmentation: bool,
    pub loss_epsilon: f64,
    pub variant: Variant,
    pub basis: BasisFamily,
}

impl Default for DescConfig {
    fn default() -> Self {
        DescConfig {
            embedding_dim: 16,
            bucket_count: 100,
            bucket_mode: BucketMode::Quantile,
            alloc_mlp_hidden: 64,
            value_mlp1_hidden: 64,
            batch_size: 4096,
            epochs: 20,
            lr: 1e-3,
            seed: 0,
            use_augmentation: true,
            loss_epsilon: 1e-6,
            variant: Variant::Full,
            basis: BasisFamily::default(),
        }
    }
}

impl DescConfig {
    /// Production-scale settings: 128-wide embeddings and 16384-sample batches.
    pub fn production_scale() -> Self {
        DescConfig {
            embedding_dim: 128,
            batch_size: 16_384,
            ..DescConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("embedding_dim", self.embedding_dim),
            ("bucket_count", self.bucket_count),
            ("alloc_mlp_hidden", self.alloc_mlp_hidden),
            ("value_mlp1_hidden", self.value_mlp1_hidden),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        if self.bucket_count < 2 {
            return Err(Error::invalid("bucket_count must be at least 2"));
        }
        if !(self.loss_epsilon > 0.0 && self.loss_epsilon < 1e-3) {
            return Err(Error::invalid("loss_epsilon must lie in (0, 1e-3)"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid("lr must be positive"));
        }
        self.basis.validate()
    }
}
