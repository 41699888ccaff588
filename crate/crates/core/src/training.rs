//! Mini-batch training with per-epoch validation, plateau scheduling and
//! best-validation parameter retention.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{oversample, Patch, PatchSource, Sample, Split, DEFAULT_OVERSAMPLE};
use crate::error::{Error, Result};
use crate::evaluation::predict_patches;
use crate::models::{Model, ModelKind};
use crate::nn::layers::{masked_bce_grad_logits, masked_bce_sum};
use crate::nn::optim::{DEFAULT_PATIENCE, DEFAULT_PLATEAU_FACTOR, DEFAULT_WEIGHT_DECAY};
use crate::nn::{optimizer_step, OptimState, OptimizerKind, PlateauState, Tensor};

/// Samples are cached across epochs while the cache stays under this size.
const SAMPLE_CACHE_BYTES: usize = 1 << 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_oversample")]
    pub oversample: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_factor")]
    pub plateau_factor: f64,
    #[serde(default = "default_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_oversample() -> usize {
    DEFAULT_OVERSAMPLE
}
fn default_patience() -> usize {
    DEFAULT_PATIENCE
}
fn default_factor() -> f64 {
    DEFAULT_PLATEAU_FACTOR
}
fn default_decay() -> f64 {
    DEFAULT_WEIGHT_DECAY
}

impl TrainConfig {
    /// Per-model optimizer, learning rate, epochs and batch size.
    pub fn preset(kind: ModelKind) -> Self {
        let (optimizer, lr, epochs, batch_size) = match kind {
            ModelKind::Naive => (OptimizerKind::Sgd, 1.0, 1, 1),
            ModelKind::Llr => (OptimizerKind::Adam, 0.125, 10, 15),
            ModelKind::Nn => (OptimizerKind::Adam, 0.125, 10, 13),
            ModelKind::Lann => (OptimizerKind::Adam, 0.016, 15, 10),
            ModelKind::Cnn => (OptimizerKind::Sgd, 0.125, 20, 12),
            ModelKind::Lacnn => (OptimizerKind::Adam, 0.001, 30, 9),
        };
        TrainConfig {
            optimizer,
            lr,
            epochs,
            batch_size,
            oversample: DEFAULT_OVERSAMPLE,
            patience: DEFAULT_PATIENCE,
            plateau_factor: DEFAULT_PLATEAU_FACTOR,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.oversample == 0 {
            return Err(Error::Config(
                "epochs, batch_size and oversample must be >= 1".into(),
            ));
        }
        if !(self.lr > 0.0)
            || !(self.weight_decay >= 0.0)
            || !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0)
        {
            return Err(Error::Config(format!(
                "need lr > 0, weight_decay >= 0 and 0 < plateau_factor <= 1, got {} / {} / {}",
                self.lr, self.weight_decay, self.plateau_factor
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// Epoch (1-based) whose parameters the model holds after training.
    pub best_epoch: usize,
}

impl TrainHistory {
    /// Tab-separated log; wall time is left out so reruns compare equal.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("epoch\ttrain_loss\tval_loss\tlr\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{}\t{:.9}\t{:.9}\t{}",
                r.epoch, r.train_loss, r.val_loss, r.lr
            );
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

/// Per-batch gradient sums. Samples are processed one at a time and the loss
/// is scaled by the batch's total valid-cell count, so the result equals the
/// gradient of the batch-mean loss.
fn batch_gradients(
    model: &Model,
    samples: &[&Sample],
) -> Result<Option<(Vec<Tensor<f32>>, f64, usize)>> {
    let total: usize = samples.iter().map(|s| s.valid_count()).sum();
    if total == 0 {
        return Ok(None);
    }
    let scale = 1.0 / total as f64;
    let mut grads: Option<Vec<Tensor<f32>>> = None;
    let mut loss = 0.0;
    for s in samples {
        if s.valid_count() == 0 {
            continue;
        }
        let trace = model.forward_train(&s.input)?;
        loss += masked_bce_sum(&trace.probs, &s.labels, &s.mask)?.0;
        let g = masked_bce_grad_logits(&trace.probs, &s.labels, &s.mask, scale)?;
        let pg = model.backward(&trace, &g)?;
        match grads.as_mut() {
            None => grads = Some(pg),
            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| a.add_assign(b)),
        }
    }
    Ok(grads.map(|g| (g, loss, total)))
}

/// Trains `model` in place and leaves it holding the parameters of the epoch
/// with the lowest validation loss.
pub fn train(
    model: &mut Model,
    source: &PatchSource,
    patches: &[Patch],
    split: &Split,
    config: &TrainConfig,
) -> Result<TrainHistory> {
    config.validate()?;
    if source.stack.len() != model.spec.in_channels {
        return Err(Error::Shape(format!(
            "model expects {} channels, stack has {}",
            model.spec.in_channels,
            source.stack.len()
        )));
    }
    if split.train.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    if split.val.is_empty() {
        return Err(Error::EmptySplit("val".into()));
    }
    if model.spec.kind == ModelKind::Naive {
        return fit_naive(model, source, patches, split);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optim = OptimState::new(config.optimizer, config.lr, config.weight_decay);
    let mut plateau = PlateauState::new(config.patience, config.plateau_factor);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Vec<Tensor<f32>>)> = None;
    let mut cache: HashMap<usize, Sample> = HashMap::new();
    let mut cache_bytes = 0usize;

    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let order = oversample(&split.train, patches, config.oversample, &mut rng);
        let (mut loss_sum, mut loss_count) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let mut fresh: Vec<Sample> = Vec::new();
            for &id in chunk {
                if !cache.contains_key(&id) {
                    let s = source.sample(&patches[id])?;
                    let bytes = s.input.len() * 4 + s.labels.len() * 5;
                    if cache_bytes + bytes <= SAMPLE_CACHE_BYTES {
                        cache_bytes += bytes;
                        cache.insert(id, s);
                    } else {
                        fresh.push(s);
                    }
                }
            }
            let mut fresh_iter = fresh.iter();
            let samples: Vec<&Sample> = chunk
                .iter()
                .map(|id| {
                    cache
                        .get(id)
                        .unwrap_or_else(|| fresh_iter.next().expect("uncached sample"))
                })
                .collect();
            if let Some((grads, loss, count)) = batch_gradients(model, &samples)? {
                optimizer_step(&mut model.params, &grads, &mut optim)?;
                loss_sum += loss;
                loss_count += count;
            }
        }
        let train_loss = if loss_count > 0 {
            loss_sum / loss_count as f64
        } else {
            f64::NAN
        };
        let val_loss = predict_patches(model, source, patches, &split.val)?.nll()?;
        let lr_used = optim.lr;
        optim.lr = plateau.update(val_loss, optim.lr);
        if best.as_ref().map_or(true, |(b, _)| val_loss < *b) {
            best = Some((val_loss, model.params.clone()));
            history.best_epoch = epoch;
        }
        let seconds = start.elapsed().as_secs_f64();
        log::info!(
            "{} epoch {epoch}/{}: train {train_loss:.5} val {val_loss:.5} lr {lr_used} ({seconds:.1}s)",
            model.spec.kind,
            config.epochs
        );
        history.records.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr: lr_used,
            seconds,
        });
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok(history)
}

/// The naive model's only "parameter" is the training positive ratio.
fn fit_naive(
    model: &mut Model,
    source: &PatchSource,
    patches: &[Patch],
    split: &Split,
) -> Result<TrainHistory> {
    let start = Instant::now();
    let (mut pos, mut total) = (0usize, 0usize);
    for &id in &split.train {
        let core = &patches[id].core;
        for r in core.row0 as usize..core.row0 as usize + core.rows {
            for c in core.col0 as usize..core.col0 as usize + core.cols {
                let i = source.labels.georef.index(r, c);
                if source.valid[i] {
                    total += 1;
                    pos += (source.labels.values[i] > 0.5) as usize;
                }
            }
        }
    }
    if total == 0 {
        return Err(Error::EmptyMask);
    }
    let q = pos as f64 / total as f64;
    // keep the constant strictly inside (0, 1)
    model.spec.naive_p = q.clamp(1e-6, 1.0 - 1e-6);
    let train_loss = crate::evaluation::constant_nll(model.spec.naive_p, q);
    let val_loss = predict_patches(model, source, patches, &split.val)?.nll()?;
    Ok(TrainHistory {
        records: vec![EpochRecord {
            epoch: 1,
            train_loss,
            val_loss,
            lr: 0.0,
            seconds: start.elapsed().as_secs_f64(),
        }],
        best_epoch: 1,
    })
}
