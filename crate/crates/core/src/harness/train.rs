//! Minibatch SGD training and top-1 evaluation.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::augment::{augment_normalize, AugmentConfig};
use super::data::Cifar10Set;
use super::model::Model;
use crate::error::{Error, Result};
use crate::tensor::{cosine_lr, BnMode, Graph, Sgd};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    Cosine,
    Constant,
}

impl std::str::FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Schedule::Cosine),
            "constant" => Ok(Schedule::Constant),
            other => Err(Error::Config(format!("unknown schedule {other:?} (cosine|constant)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub schedule: Schedule,
    /// Random crop and flip on training batches; normalization always applies.
    pub augment: bool,
    pub normalize: AugmentConfig,
    pub seed: u64,
    /// Train on the first `n` records only.
    pub subset_size: Option<usize>,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            epochs: 100,
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            schedule: Schedule::Cosine,
            augment: true,
            normalize: AugmentConfig::default(),
            seed: 0,
            subset_size: None,
            eval_batch: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("{what} must be positive")));
        if self.batch_size == 0 {
            return bad("batch_size");
        }
        if self.eval_batch == 0 {
            return bad("eval_batch");
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0,1)".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.subset_size == Some(0) {
            return bad("subset_size");
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f32 {
        match self.schedule {
            Schedule::Cosine => cosine_lr(epoch, self.epochs, self.lr0),
            Schedule::Constant => self.lr0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean training loss over the epoch.
    pub loss: f64,
    /// Test top-1 in percent, when a test set was given.
    pub top1: Option<f64>,
    pub lr: f32,
    /// Norm of the optical-branch gradients summed over the epoch.
    pub optical_grad_norm: f64,
    pub checkpoint: Option<PathBuf>,
}

/// Percentage of positions where prediction equals label.
pub fn top1(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    100.0 * hits as f64 / labels.len() as f64
}

pub fn argmax_rows(logits: &[f32], classes: usize) -> Vec<usize> {
    logits
        .chunks_exact(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

pub fn predict(model: &mut Model, images: &Cifar10Set, config: &TrainConfig) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut preds = Vec::with_capacity(images.len());
    for start in (0..images.len()).step_by(config.eval_batch) {
        let idx: Vec<usize> = (start..(start + config.eval_batch).min(images.len())).collect();
        let batch = images.select(&idx)?;
        let x = augment_normalize(&batch.images, &config.normalize, false, &mut rng)?;
        let logits = model.logits(&x, BnMode::Eval)?;
        preds.extend(argmax_rows(logits.data(), logits.shape()[1]));
    }
    Ok(preds)
}

/// Test top-1 in percent.
pub fn evaluate(model: &mut Model, test: &Cifar10Set, config: &TrainConfig) -> Result<f64> {
    Ok(top1(&predict(model, test, config)?, &test.labels))
}

/// [`train_with`] without a per-epoch callback.
pub fn train(
    model: &mut Model,
    data: &Cifar10Set,
    test: Option<&Cifar10Set>,
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<Vec<EpochMetrics>> {
    train_with(model, data, test, config, checkpoint_dir, |_, _| Ok(()))
}

/// Trains for `config.epochs`, writing `epoch_{e}.tnsr` into
/// `checkpoint_dir` after every epoch. A non-finite loss or gradient aborts
/// with [`Error::TrainingDiverged`] naming the last good checkpoint.
pub fn train_with(
    model: &mut Model,
    data: &Cifar10Set,
    test: Option<&Cifar10Set>,
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochMetrics, &mut Model) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    config.validate()?;
    let data = match config.subset_size {
        Some(n) => data.subset(n)?,
        None => data.clone(),
    };
    if data.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sgd = Sgd::new(config.momentum, config.weight_decay);
    let optical = model.optical_branch_ids();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut last_good: Option<PathBuf> = None;
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut grad_sq = 0.0f64;
        for chunk in order.chunks(config.batch_size) {
            let batch = data.select(chunk)?;
            let x = augment_normalize(&batch.images, &config.normalize, config.augment, &mut rng)?;
            let mut g = Graph::new();
            let xv = g.input(x);
            let logits = model.forward(&mut g, xv, BnMode::Train)?;
            let loss = g.softmax_cross_entropy(logits, &batch.labels)?;
            let value = g.value(loss).item();
            let diverged = || Error::TrainingDiverged {
                epoch,
                checkpoint: last_good.clone(),
            };
            if !value.is_finite() {
                log::error!("non-finite loss {value} in epoch {epoch}");
                return Err(diverged());
            }
            g.backward(loss)?;
            model.store.collect_grads(&g);
            for &id in &optical {
                if let Some(gr) = model.store.tensor(id).grad() {
                    grad_sq += gr.iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
                }
            }
            if let Err(e) = sgd.step(&mut model.store, lr) {
                log::error!("{e}");
                return Err(diverged());
            }
            loss_sum += value as f64 * chunk.len() as f64;
        }
        let checkpoint = match checkpoint_dir {
            Some(dir) => {
                let p = dir.join(format!("epoch_{epoch}.tnsr"));
                model.save(&p)?;
                Some(p)
            }
            None => None,
        };
        let top1 = test.map(|t| evaluate(model, t, config)).transpose()?;
        let m = EpochMetrics {
            epoch,
            loss: loss_sum / data.len() as f64,
            top1,
            lr,
            optical_grad_norm: grad_sq.sqrt(),
            checkpoint: checkpoint.clone(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} top1 {} lr {lr:.4}",
            m.loss,
            top1.map_or("-".to_string(), |t| format!("{t:.2}"))
        );
        on_epoch(&m, model)?;
        history.push(m);
        last_good = checkpoint;
    }
    Ok(history)
}
