use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{DescConfig, Variant};
use super::model::{DescModel, Prepared, BASIS_PARAMS};
use crate::basis::MIN_HYPERPARAM;
use crate::data::{fit_buckets, Dataset};
use crate::diffcore::{Adam, Tape};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricsConfig, MetricsReport};

/// Mean negative log-likelihood of calibrated probabilities.
pub fn loss(p_calib: &[f64], labels: &[f64]) -> Result<f64> {
    if p_calib.len() != labels.len() || labels.is_empty() {
        return Err(Error::invalid("loss needs equally many (non-zero) scores and labels"));
    }
    let total: f64 = p_calib
        .iter()
        .zip(labels)
        .map(|(&p, &y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
        .sum();
    Ok(total / labels.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Full-data loss before the first update.
    pub initial_loss: f64,
    /// Full-data loss after the last update.
    pub final_loss: f64,
    /// Mean minibatch loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

// Seed offset separating the shuffling stream from initialization.
const SHUFFLE_STREAM: u64 = 0x5348_5546;

fn full_loss(model: &DescModel, prep: &Prepared) -> Result<f64> {
    let p = model.predict_prepared(prep)?;
    loss(&p, &prep.labels)
}

/// Minibatch Adam over seeded shuffles of `data` for `config.epochs` epochs.
pub fn train(model: &mut DescModel, data: &Dataset) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    let prep = model.prepare(data)?;
    let cfg = model.config.clone();
    let adam = Adam::with_lr(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..prep.len()).collect();

    let initial_loss = full_loss(model, &prep)?;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut steps = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut weighted = 0.0;
        for (b, rows) in order.chunks(cfg.batch_size).enumerate() {
            let grads = {
                let mut tape = Tape::new(&model.store);
                let g = model.build(&mut tape, &prep, rows)?;
                let labels: Vec<f64> = rows.iter().map(|&r| prep.labels[r]).collect();
                let l = tape.bce(g.p, &labels)?;
                let value = tape.scalar(l);
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "training loss {value} at epoch {epoch}, batch {b}"
                    )));
                }
                weighted += value * rows.len() as f64;
                tape.backward(l)?
            };
            adam.step(&mut model.store, &grads)?;
            steps += 1;
            if let Some(id) = model.store.find(BASIS_PARAMS) {
                model.store.get_mut(id).mapv_inplace(|x| x.max(MIN_HYPERPARAM));
                let theta = model.store.get(id).as_slice().expect("contiguous").to_vec();
                model.basis.set_params(&theta);
            }
        }
        epoch_losses.push(weighted / prep.len() as f64);
    }
    let final_loss = if cfg.epochs == 0 {
        initial_loss
    } else {
        full_loss(model, &prep)?
    };
    Ok(TrainReport {
        initial_loss,
        final_loss,
        epoch_losses,
        steps,
    })
}

/// Fits buckets on `calibration`, initializes and trains a model.
pub fn fit(calibration: &Dataset, config: &DescConfig) -> Result<(DescModel, TrainReport)> {
    let buckets = fit_buckets(calibration, config.bucket_count, config.bucket_mode)?;
    let mut model = DescModel::new(calibration.schema.clone(), buckets, config.clone())?;
    let report = train(&mut model, calibration)?;
    Ok((model, report))
}

/// Trains `variant` on `calibration` and evaluates it on `evaluation`.
pub fn ablate(
    variant: Variant,
    calibration: &Dataset,
    evaluation: &Dataset,
    config: &DescConfig,
    metrics: &MetricsConfig,
) -> Result<MetricsReport> {
    let config = DescConfig {
        variant,
        ..config.clone()
    };
    let (model, _) = fit(calibration, &config)?;
    let p = model.predict(evaluation)?;
    evaluate(evaluation, &p, metrics)
}
