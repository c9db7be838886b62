use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::CountModel;
use super::net::{CountFeatures, CountKind, HeadBatch, Heads};
use crate::dataset::{augment_counting, TileSource};
use crate::nn::{mse, rmse, Adam, Optimizer, Parameterized};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs without a validation MAE improvement before stopping.
    pub patience: usize,
    /// Five-fold isometry augmentation of the training set.
    pub augment: bool,
    /// Start the output bias at the mean training count.
    pub init_output_bias: bool,
    /// Whether stream weights were copied from trained single-stream models.
    pub warm_start: bool,
    pub seed: u64,
}

impl Default for CounterTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            lr: 1e-4,
            patience: 10,
            augment: true,
            init_output_bias: true,
            warm_start: false,
            seed: 0,
        }
    }
}

/// Per-epoch losses. `val_*` are empty when there is no validation set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_mae: Vec<f64>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Precomputed features with their label.
#[derive(Clone, Debug)]
pub struct CountSample {
    pub id: String,
    pub count: f32,
    pub features: CountFeatures,
}

/// Features of every tile, optionally with the five isometries of each.
pub fn extract_samples(model: &CountModel, source: &dyn TileSource, augment: bool) -> Result<Vec<CountSample>> {
    let per_tile: Vec<Result<Vec<CountSample>>> = (0..source.len())
        .into_par_iter()
        .map(|i| {
            let tile = source.tile(i)?;
            let variants = if augment { augment_counting(&tile) } else { vec![tile] };
            variants
                .into_iter()
                .map(|t| {
                    Ok(CountSample {
                        features: model.features(&t)?,
                        count: t.count as f32,
                        id: t.id,
                    })
                })
                .collect()
        })
        .collect();
    let mut out = Vec::new();
    for r in per_tile {
        out.extend(r?);
    }
    Ok(out)
}

fn batch_of(samples: &[CountSample], idx: &[usize]) -> Result<(HeadBatch<f32>, Array1<f32>)> {
    let feats: Vec<&CountFeatures> = idx.iter().map(|&i| &samples[i].features).collect();
    let target = idx.iter().map(|&i| samples[i].count).collect();
    Ok((HeadBatch::from_features(&feats)?, target))
}

fn loss_fn(kind: CountKind) -> fn(&Array1<f32>, &Array1<f32>) -> Result<(f32, Array1<f32>)> {
    if kind.uses_rmse() {
        rmse
    } else {
        mse
    }
}

/// Inference predictions for many samples.
pub fn predict_samples(heads: &Heads<f32>, samples: &[CountSample], batch_size: usize) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..samples.len()).collect();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let (batch, _) = batch_of(samples, chunk)?;
        out.extend(heads.infer(&batch)?.iter().map(|&v| f64::from(v)));
    }
    Ok(out)
}

fn validate(heads: &Heads<f32>, val: &[CountSample], batch_size: usize) -> Result<(f64, f64)> {
    let pred = predict_samples(heads, val, batch_size)?;
    let p: Array1<f32> = pred.iter().map(|&v| v as f32).collect();
    let t: Array1<f32> = val.iter().map(|s| s.count).collect();
    let loss = f64::from(loss_fn(heads.kind)(&p, &t)?.0);
    let mae = pred.iter().zip(val).map(|(p, s)| (p - f64::from(s.count)).abs()).sum::<f64>() / val.len() as f64;
    Ok((loss, mae))
}

/// Train heads on precomputed features with Adam and early stopping on
/// validation MAE; the best weights are restored at the end.
pub fn fit_on_features(
    heads: &mut Heads<f32>,
    optimizer: &mut Adam<f32>,
    train: &[CountSample],
    val: &[CountSample],
    config: &CounterTrainConfig,
) -> Result<LossHistory> {
    if train.is_empty() {
        return Err(Error::Training("empty training set".into()));
    }
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(Error::Config("batch size and epochs must be positive".into()));
    }
    if config.init_output_bias {
        let mean = train.iter().map(|s| f64::from(s.count)).sum::<f64>() / train.len() as f64;
        heads.set_output_bias(mean);
    }
    if val.is_empty() {
        log::warn!("no validation samples; training all {} epochs without early stopping", config.epochs);
    }
    let loss = loss_fn(heads.kind);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = LossHistory::default();
    let mut best: Option<(f64, Heads<f32>)> = None;
    let mut stale = 0;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let (batch, target) = batch_of(train, chunk)?;
            heads.zero_grad();
            let pred = heads.forward(&batch, &mut rng)?;
            let (l, grad) = loss(&pred, &target)?;
            if !l.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss {l} at epoch {epoch}, batch {batches}; predictions {:?}",
                    pred.iter().take(4).collect::<Vec<_>>()
                )));
            }
            heads.backward(&batch, &grad)?;
            optimizer.step(heads);
            total += f64::from(l);
            batches += 1;
        }
        history.train_loss.push(total / batches as f64);
        if val.is_empty() {
            history.best_epoch = epoch;
            continue;
        }
        let (vl, mae) = validate(heads, val, config.batch_size)?;
        history.val_loss.push(vl);
        history.val_mae.push(mae);
        log::info!(
            "{} epoch {epoch}: train {:.4} val {:.4} val MAE {:.3}",
            heads.kind,
            history.train_loss[epoch - 1],
            vl,
            mae
        );
        if best.as_ref().is_none_or(|(b, _)| mae < *b) {
            best = Some((mae, heads.clone()));
            history.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    if let Some((_, h)) = best {
        *heads = h;
    }
    Ok(history)
}

/// Extract features (backbone and segmenter frozen), then fit the heads.
pub fn train_counter(
    model: &mut CountModel,
    train: &dyn TileSource,
    val: &dyn TileSource,
    config: &CounterTrainConfig,
) -> Result<LossHistory> {
    if train.is_empty() {
        return Err(Error::Training("empty training manifest".into()));
    }
    let train_samples = extract_samples(model, train, config.augment)?;
    let val_samples = extract_samples(model, val, false)?;
    fit_model(model, &train_samples, &val_samples, config)
}

/// [`fit_on_features`] for a whole model, recording config, history and
/// optimizer state on it.
pub fn fit_model(
    model: &mut CountModel,
    train: &[CountSample],
    val: &[CountSample],
    config: &CounterTrainConfig,
) -> Result<LossHistory> {
    let mut adam = match model.optimizer.take() {
        Some(a) if config.warm_start => a,
        _ => Adam::new(config.lr),
    };
    adam.lr = config.lr;
    let history = fit_on_features(&mut model.heads, &mut adam, train, val, config)?;
    model.optimizer = Some(adam);
    model.history = history.clone();
    model.train_config = Some(config.clone());
    Ok(history)
}
