//! The epoch loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::Scorer;
use crate::dataio::Dataset;
use crate::encoders::{ModelParams, SentenceEncoder};
use crate::error::{Result, ScanError};
use crate::eval::{score_dataset, EvalReport};
use crate::graph::{batch_loss_and_grad, BatchRef};
use crate::learning::{adam_step, LossConfig, LrSchedule, OptimizerState};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub clip_norm: f64,
    pub loss: LossConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.batch_size < 2 {
            return Err(ScanError::Config(format!(
                "batch size must be at least 2, got {}",
                self.batch_size
            )));
        }
        let s = &self.schedule;
        if !(s.initial > 0.0 && s.initial.is_finite() && s.decay_factor > 0.0 && s.decay_factor.is_finite()) {
            return Err(ScanError::Config(format!("invalid learning-rate schedule {s:?}")));
        }
        if !(self.clip_norm > 0.0) {
            return Err(ScanError::Config(format!("clip norm must be positive, got {}", self.clip_norm)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    /// Mean summed-batch loss over the epoch's batches.
    pub train_loss: f64,
    pub batches: usize,
    /// Batches dropped for having fewer than two pairs.
    pub skipped_batches: usize,
    pub grad_norm: f64,
    pub val: Option<EvalReport>,
}

impl EpochMetrics {
    /// One line of the training log, without the trailing newline.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub last: ModelParams,
    /// Weights from the epoch with the highest validation recall sum
    /// (earliest on ties); the last epoch when there is no validation set.
    pub best: ModelParams,
    /// 0 when no epoch ran.
    pub best_epoch: usize,
    pub history: Vec<EpochMetrics>,
}

/// Pairs for one epoch, as (image, caption) indices.
///
/// Every caption is used once. Captions are dealt out in rounds; within a
/// round each image appears at most once and rounds are never mixed inside
/// a batch, so in-batch negatives never share the positive's image.
pub fn epoch_batches(data: &Dataset, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut per_image: Vec<Vec<usize>> = vec![Vec::new(); data.images.len()];
    for (j, c) in data.captions.iter().enumerate() {
        per_image[c.image].push(j);
    }
    for caps in &mut per_image {
        caps.shuffle(rng);
    }
    let rounds = per_image.iter().map(Vec::len).max().unwrap_or(0);
    let mut batches = Vec::new();
    for r in 0..rounds {
        let mut round: Vec<usize> = per_image.iter().filter_map(|caps| caps.get(r).copied()).collect();
        round.shuffle(rng);
        batches.extend(round.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches
}

/// Trains `params` in place of a copy and returns the trajectory.
///
/// `on_epoch` sees each epoch's metrics as soon as they exist. With
/// `parallel` set, pair scoring uses the current rayon pool; results do not
/// depend on the pool size.
#[allow(clippy::too_many_arguments)]
pub fn train(
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    params: ModelParams,
    encoder: SentenceEncoder,
    scorer: &Scorer,
    cfg: &TrainConfig,
    seed: u64,
    parallel: bool,
    on_epoch: &mut dyn FnMut(&EpochMetrics, &ModelParams) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    scorer.validate()?;
    if train_set.captions.is_empty() {
        return Err(ScanError::Config("training set has no captions".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut opt = OptimizerState::new(&params, cfg.schedule, cfg.clip_norm);
    let mut params = params;
    let mut best = params.clone();
    let mut best_epoch = 0;
    let mut best_rsum = f64::NEG_INFINITY;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.rate(epoch);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        let mut skipped = 0;
        let mut norm_sum = 0.0;
        for (bi, batch) in epoch_batches(train_set, cfg.batch_size, &mut rng).iter().enumerate() {
            if batch.len() < 2 {
                skipped += 1;
                continue;
            }
            let at = |e: ScanError| ScanError::Training {
                epoch: epoch + 1,
                batch: bi,
                message: e.to_string(),
            };
            let refs = BatchRef {
                images: batch.iter().map(|&j| &train_set.images[train_set.captions[j].image]).collect(),
                sentences: batch.iter().map(|&j| train_set.captions[j].tokens.as_slice()).collect(),
            };
            let g = batch_loss_and_grad(&params, encoder, scorer, &cfg.loss, &refs, parallel).map_err(at)?;
            if !g.loss.is_finite() {
                return Err(at(ScanError::Numeric(format!("loss is {}", g.loss))));
            }
            norm_sum += adam_step(&mut opt, &mut params, g.grads, lr).map_err(at)?;
            loss_sum += g.loss;
            batches += 1;
        }
        let val = match val_set {
            Some(v) if !v.captions.is_empty() => {
                Some(EvalReport::compute(&score_dataset(v, &params, encoder, scorer, parallel)?)?)
            }
            _ => None,
        };
        let rsum = val.as_ref().map_or(f64::INFINITY, |r| r.rsum);
        if rsum > best_rsum || val.is_none() {
            best_rsum = rsum;
            best = params.clone();
            best_epoch = epoch + 1;
        }
        let denom = batches.max(1) as f64;
        let m = EpochMetrics {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / denom,
            batches,
            skipped_batches: skipped,
            grad_norm: norm_sum / denom,
            val,
        };
        on_epoch(&m, &params)?;
        history.push(m);
    }
    Ok(TrainOutcome {
        last: params,
        best,
        best_epoch,
        history,
    })
}
