//! Contrastive pretraining of the encoder and prompted training of the decoder.
//!
//! Both phases use SGD with momentum. Parameters and velocities are rounded to
//! `f32` after every step so a checkpoint written between epochs restores the
//! exact optimizer state. All randomness (shuffling, augmentation, point
//! sampling) is derived from the master seed, the epoch and the image index.

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::losses::{downsample_partition, LossConfig};
use crate::maskops::{connected_components, sample_point_pairs};
use crate::net::{
    encode_image, encode_prompt, loss_and_gradients, BaselineItem, Batch, Checkpoint, Mode, ModelParams,
    PretrainItem, TrainItem,
};
use crate::synth::{postprocess, PostProcessConfig};
use crate::types::{EmbeddingGrid, Seed, K};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub loss: LossConfig,
    pub augment: PostProcessConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 0.05,
            momentum: 0.9,
            batch_size: 8,
            loss: LossConfig::default(),
            augment: PostProcessConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub pairs_per_image: usize,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.02,
            momentum: 0.9,
            batch_size: 8,
            pairs_per_image: 4,
            loss: LossConfig::default(),
        }
    }
}

fn validate_optimizer(lr: f64, momentum: f64, batch_size: usize) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be finite and non-negative, got {lr}")));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::Config(format!("momentum must be in [0, 1), got {momentum}")));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    Ok(())
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        validate_optimizer(self.lr, self.momentum, self.batch_size)?;
        self.loss.validate()?;
        self.augment.validate()
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        validate_optimizer(self.lr, self.momentum, self.batch_size)?;
        if self.pairs_per_image == 0 {
            return Err(Error::Config("pairs_per_image must be positive".into()));
        }
        self.loss.validate()
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean of the per-batch losses of the epoch.
    pub loss: f64,
    /// Mean of the per-batch pixel accuracies; absent in pretraining.
    pub acc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: Vec<f64>,
    mask: Vec<bool>,
}

impl Sgd {
    fn new(lr: f64, momentum: f64, params: &ModelParams, mode: Mode, velocity: Option<Vec<f64>>) -> Self {
        Self {
            lr,
            momentum,
            velocity: velocity.unwrap_or_else(|| vec![0.0; params.len()]),
            mask: params.trainable_mask(mode),
        }
    }

    fn step(&mut self, params: &mut ModelParams, grads: &[f64]) {
        let values = params.values_mut();
        for i in 0..values.len() {
            if !self.mask[i] {
                continue;
            }
            let v = (self.momentum * self.velocity[i] + grads[i]) as f32 as f64;
            self.velocity[i] = v;
            values[i] = (values[i] - self.lr * v) as f32 as f64;
        }
    }
}

/// Image order for one epoch.
fn epoch_order(n: usize, seed: Seed, phase: &str, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed.derive_named(phase, epoch as u64).rng());
    order
}

fn sample_seed(seed: Seed, phase: &str, epoch: usize, index: usize) -> Seed {
    seed.derive_named(phase, epoch as u64).derive(index as u64)
}

/// Mean of `values`, or 0 for an empty epoch.
fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Fresh start: parameters initialized from `seed`.
pub fn pretrain(cfg: &PretrainConfig, data: &Dataset, seed: Seed) -> Result<TrainOutcome> {
    let start = Checkpoint::new(ModelParams::init(seed.derive_named("init", 0)));
    pretrain_from(cfg, data, start, seed)
}

/// Runs pretraining epochs `start.epoch..cfg.epochs`.
pub fn pretrain_from(cfg: &PretrainConfig, data: &Dataset, start: Checkpoint, seed: Seed) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("pretraining dataset is empty".into()));
    }
    // Images whose cells all fall in one source have no negatives.
    let mut usable = Vec::new();
    for (i, e) in data.entries.iter().enumerate() {
        let partition = e
            .partition
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{} has no source partition", e.name)))?;
        let labels = downsample_partition(partition, K)?;
        if labels.iter().any(|&l| l != labels[0]) {
            usable.push((i, labels));
        }
    }
    if usable.is_empty() {
        return Err(Error::Config("every pretraining image is single-source".into()));
    }
    let mut params = start.params;
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, &params, Mode::Pretrain, start.momentum);
    let mut log = Vec::new();
    for epoch in start.epoch as usize..cfg.epochs {
        let order = epoch_order(usable.len(), seed, "pretrain.shuffle", epoch);
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let items = chunk
                .par_iter()
                .map(|&u| {
                    let (i, labels) = &usable[u];
                    let image = postprocess(
                        &data.entries[*i].image,
                        &cfg.augment,
                        sample_seed(seed, "pretrain.augment", epoch, *i),
                    )?;
                    Ok(PretrainItem {
                        image,
                        cell_labels: labels.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let out = loss_and_gradients(&params, &Batch::Pretrain(items), &cfg.loss)?;
            if out.terms > 0 {
                opt.step(&mut params, &out.grads);
                losses.push(out.loss);
            }
        }
        let entry = EpochLog {
            epoch: epoch + 1,
            loss: mean(&losses),
            acc: None,
        };
        log::info!("pretrain epoch {} loss {:.6}", entry.epoch, entry.loss);
        log.push(entry);
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            params,
            momentum: Some(opt.velocity),
            epoch: cfg.epochs.max(start.epoch as usize) as u32,
        },
        log,
    })
}

/// Encoder output for every image (the encoder is frozen during training).
pub fn encode_dataset(params: &ModelParams, data: &Dataset) -> Result<Vec<EmbeddingGrid>> {
    data.entries.par_iter().map(|e| encode_image(params, &e.image)).collect()
}

/// Decoder training from a pretrained model. The decoder keeps the values it
/// has in `pretrained`; its momentum restarts at zero.
pub fn train(cfg: &TrainConfig, data: &Dataset, pretrained: &ModelParams, seed: Seed) -> Result<TrainOutcome> {
    train_from(cfg, data, Checkpoint::new(pretrained.clone()), seed)
}

/// Runs training epochs `start.epoch..cfg.epochs`.
pub fn train_from(cfg: &TrainConfig, data: &Dataset, start: Checkpoint, seed: Seed) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let mut params = start.params;
    let grids = encode_dataset(&params, data)?;
    let components: Vec<_> = data.entries.par_iter().map(|e| connected_components(&e.mask)).collect();
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, &params, Mode::Train, start.momentum);
    let mut log = Vec::new();
    for epoch in start.epoch as usize..cfg.epochs {
        let order = epoch_order(data.len(), seed, "train.shuffle", epoch);
        let (mut losses, mut accs) = (Vec::new(), Vec::new());
        for chunk in order.chunks(cfg.batch_size) {
            let items = chunk
                .par_iter()
                .map(|&i| {
                    let e = &data.entries[i];
                    let (h, w) = (e.mask.height(), e.mask.width());
                    let pairs = sample_point_pairs(&e.mask, cfg.pairs_per_image, sample_seed(seed, "train.pairs", epoch, i));
                    let mut prompts = Vec::with_capacity(2 * pairs.len());
                    for (a, b) in pairs {
                        for p in [a, b] {
                            prompts.push((encode_prompt(&params, p, h, w)?, components[i].point_mask(p)?));
                        }
                    }
                    Ok(TrainItem {
                        grid: grids[i].clone(),
                        prompts,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let out = loss_and_gradients(&params, &Batch::Train(items), &cfg.loss)?;
            opt.step(&mut params, &out.grads);
            losses.push(out.loss);
            accs.push(out.accuracy.unwrap_or(0.0));
        }
        let entry = EpochLog {
            epoch: epoch + 1,
            loss: mean(&losses),
            acc: Some(mean(&accs)),
        };
        log::info!("train epoch {} loss {:.6} acc {:.4}", entry.epoch, entry.loss, mean(&accs));
        log.push(entry);
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            params,
            momentum: Some(opt.velocity),
            epoch: cfg.epochs.max(start.epoch as usize) as u32,
        },
        log,
    })
}

/// Trains the decoder as an unprompted binary segmenter with plain BCE
/// (ablation reference). `pairs_per_image` and the loss weights are unused.
pub fn train_baseline(cfg: &TrainConfig, data: &Dataset, pretrained: &ModelParams, seed: Seed) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let mut params = pretrained.clone();
    let grids = encode_dataset(&params, data)?;
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, &params, Mode::Baseline, None);
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        let order = epoch_order(data.len(), seed, "baseline.shuffle", epoch);
        let (mut losses, mut accs) = (Vec::new(), Vec::new());
        for chunk in order.chunks(cfg.batch_size) {
            let items = chunk
                .iter()
                .map(|&i| BaselineItem {
                    grid: grids[i].clone(),
                    mask: data.entries[i].mask.clone(),
                })
                .collect();
            let out = loss_and_gradients(&params, &Batch::Baseline(items), &cfg.loss)?;
            opt.step(&mut params, &out.grads);
            losses.push(out.loss);
            accs.push(out.accuracy.unwrap_or(0.0));
        }
        log.push(EpochLog {
            epoch: epoch + 1,
            loss: mean(&losses),
            acc: Some(mean(&accs)),
        });
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            params,
            momentum: Some(opt.velocity),
            epoch: cfg.epochs as u32,
        },
        log,
    })
}

/// CSV with header `epoch,loss,acc`; `acc` is empty for pretraining rows.
pub fn write_log_csv(log: &[EpochLog], path: &Path) -> Result<()> {
    let mut out = String::from("epoch,loss,acc\n");
    for e in log {
        let acc = e.acc.map(|a| a.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{}\n", e.epoch, e.loss, acc));
    }
    crate::io::write_all(path, out.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_sample;
    use crate::types::SourcePartition;

    fn small_data(n: usize, size: usize) -> Dataset {
        Dataset::from_samples((0..n).map(|i| generate_sample(Seed(100 + i as u64), size, 2).unwrap()).collect())
    }

    fn quick_pretrain() -> PretrainConfig {
        PretrainConfig {
            epochs: 2,
            batch_size: 2,
            ..PretrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let data = small_data(3, 32);
        let cfg = PretrainConfig {
            lr: 0.0,
            epochs: 1,
            ..quick_pretrain()
        };
        let out = pretrain(&cfg, &data, Seed(1)).unwrap();
        assert_eq!(out.checkpoint.params, ModelParams::init(Seed(1).derive_named("init", 0)));
        let tcfg = TrainConfig {
            lr: 0.0,
            epochs: 1,
            ..TrainConfig::default()
        };
        let trained = train(&tcfg, &data, &out.checkpoint.params, Seed(2)).unwrap();
        assert_eq!(trained.checkpoint.params, out.checkpoint.params);
    }

    #[test]
    fn training_freezes_encoder_and_prompt() {
        let data = small_data(3, 32);
        let base = ModelParams::init(Seed(4));
        let tcfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let out = train(&tcfg, &data, &base, Seed(5)).unwrap();
        let p = &out.checkpoint.params;
        for g in p.groups() {
            let same = p.values()[g.range()] == base.values()[g.range()];
            assert_eq!(same, g.stage != crate::net::Stage::Decoder, "{}", g.name);
        }
    }

    #[test]
    fn pretraining_is_deterministic_and_resumable() {
        let data = small_data(3, 32);
        let cfg = quick_pretrain();
        let a = pretrain(&cfg, &data, Seed(9)).unwrap();
        let b = pretrain(&cfg, &data, Seed(9)).unwrap();
        assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());

        let half = pretrain(&PretrainConfig { epochs: 1, ..cfg.clone() }, &data, Seed(9)).unwrap();
        let restored = Checkpoint::from_bytes(&half.checkpoint.to_bytes().unwrap()).unwrap();
        let resumed = pretrain_from(&cfg, &data, restored, Seed(9)).unwrap();
        assert_eq!(resumed.checkpoint, a.checkpoint);
        assert_eq!(resumed.log[0], a.log[1]);
    }

    #[test]
    fn training_resume_is_bit_identical() {
        let data = small_data(3, 32);
        let base = ModelParams::init(Seed(4));
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let full = train(&cfg, &data, &base, Seed(5)).unwrap();
        let half = train(&TrainConfig { epochs: 1, ..cfg.clone() }, &data, &base, Seed(5)).unwrap();
        let restored = Checkpoint::from_bytes(&half.checkpoint.to_bytes().unwrap()).unwrap();
        let resumed = train_from(&cfg, &data, restored, Seed(5)).unwrap();
        assert_eq!(resumed.checkpoint, full.checkpoint);
    }

    #[test]
    fn logged_loss_is_mean_of_batches() {
        // With lr = 0 each batch loss can be recomputed independently.
        let data = small_data(3, 64);
        for e in &data.entries {
            let labels = downsample_partition(e.partition.as_ref().unwrap(), K).unwrap();
            assert!(labels.iter().any(|&l| l != labels[0]));
        }
        let cfg = PretrainConfig {
            lr: 0.0,
            epochs: 1,
            batch_size: 2,
            augment: PostProcessConfig::disabled(),
            ..PretrainConfig::default()
        };
        let out = pretrain(&cfg, &data, Seed(6)).unwrap();
        let params = ModelParams::init(Seed(6).derive_named("init", 0));
        let order = epoch_order(3, Seed(6), "pretrain.shuffle", 0);
        let mut batch_losses = Vec::new();
        for chunk in order.chunks(2) {
            let items = chunk
                .iter()
                .map(|&i| {
                    let p = data.entries[i].partition.as_ref().unwrap();
                    PretrainItem {
                        image: data.entries[i].image.clone(),
                        cell_labels: downsample_partition(p, K).unwrap(),
                    }
                })
                .collect();
            batch_losses.push(loss_and_gradients(&params, &Batch::Pretrain(items), &cfg.loss).unwrap().loss);
        }
        let expected = (batch_losses[0] + batch_losses[1]) / 2.0;
        assert_eq!(out.log[0].loss, expected);
    }

    #[test]
    fn dataset_errors_are_config_errors() {
        let cfg = quick_pretrain();
        assert!(matches!(pretrain(&cfg, &Dataset::default(), Seed(0)), Err(Error::Config(_))));
        let single = Dataset::from_samples(vec![(
            generate_sample(Seed(1), 32, 1).unwrap().0,
            SourcePartition::uniform(32, 32).unwrap(),
        )]);
        assert!(matches!(pretrain(&cfg, &single, Seed(0)), Err(Error::Config(_))));
    }

    #[test]
    fn log_csv_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let log = [
            EpochLog { epoch: 1, loss: 0.5, acc: Some(0.75) },
            EpochLog { epoch: 2, loss: 0.25, acc: None },
        ];
        write_log_csv(&log, &path).unwrap();
        assert_eq!(std::fs::read_to_string(path).unwrap(), "epoch,loss,acc\n1,0.5,0.75\n2,0.25,\n");
    }
}
