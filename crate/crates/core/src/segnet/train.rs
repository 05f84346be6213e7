//! Training loop: deterministic split, shuffled mini-batches, per-epoch
//! metrics, and dataset loading from chip manifests.

use std::fs;
use std::path::Path;

use ndarray::{Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Mask;
use crate::segnet::adam::{adam_step, AdamHyper, AdamState};
use crate::segnet::metrics::{binary_accuracy, dice_coeff, iou_hard, jaccard_coeff};
use crate::segnet::{backward_from_cache, forward, forward_cached, ModelConfig, ModelParams};
use crate::water::ChipManifest;

fn default_lr() -> f64 {
    0.001
}
fn default_epochs() -> usize {
    100
}
fn default_batch_size() -> usize {
    8
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_dice_smooth() -> f64 {
    1.0
}
fn default_validation_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_epsilon: f64,
    #[serde(default = "default_dice_smooth")]
    pub dice_smooth: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
    /// Stop after the first epoch whose training dice exceeds this value.
    #[serde(default)]
    pub early_stop_train_dice: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: default_lr(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_epsilon: default_adam_eps(),
            dice_smooth: default_dice_smooth(),
            seed: 0,
            validation_fraction: default_validation_fraction(),
            early_stop_train_dice: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.validation_fraction >= 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::InvalidConfig(
                "validation_fraction must be in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
        }
    }
}

/// One training sample: [h, w, 4] inputs and a [h, w, 1] hard label.
#[derive(Debug, Clone)]
pub struct Sample {
    pub x: Array3<f32>,
    pub y: Array3<f32>,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample from a 4-channel chip raster and its label mask.
    pub fn push_chip(&mut self, chip: &crate::water::Chip, label: &Mask) -> Result<()> {
        let side = crate::water::CHIP_SIZE;
        if label.width() != side || label.height() != side {
            return Err(Error::ShapeMismatch(format!(
                "label is {}x{}, chip is {side}x{side}",
                label.width(),
                label.height()
            )));
        }
        let mut x = Array3::<f32>::zeros((side, side, 4));
        for c in 0..4 {
            let ch = chip.channel(c);
            for r in 0..side {
                for col in 0..side {
                    x[(r, col, c)] = ch[r * side + col];
                }
            }
        }
        let mut y = Array3::<f32>::zeros((side, side, 1));
        for r in 0..side {
            for col in 0..side {
                y[(r, col, 0)] = label.get(col, r) as f32;
            }
        }
        self.samples.push(Sample { x, y });
        Ok(())
    }
}

/// Load a chip-manifest dataset; paths are resolved relative to the manifest.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = ChipManifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut ds = Dataset::default();
    for entry in &manifest.chips {
        let chip_raster = crate::raster::load_raster(&base.join(&entry.chip))?;
        let chip = crate::water::Chip::from_raster(
            &chip_raster,
            crate::water::ChipSource {
                tile_id: entry.tile_id.clone(),
                col_off: entry.col_off,
                row_off: entry.row_off,
            },
        )?;
        let label = crate::raster::load_mask(&base.join(&entry.label))?;
        ds.push_chip(&chip, &label)?;
    }
    Ok(ds)
}

/// Per-split metric values for one epoch.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MetricSet {
    pub dice: f64,
    pub jaccard: f64,
    pub iou: f64,
    pub binary_accuracy: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: MetricSet,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation: Option<MetricSet>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("epoch,split,dice,jaccard,iou,binary_accuracy,loss\n");
        for rec in &self.epochs {
            let mut row = |split: &str, m: &MetricSet| {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    rec.epoch, split, m.dice, m.jaccard, m.iou, m.binary_accuracy, m.loss
                ));
            };
            row("train", &rec.train);
            if let Some(v) = &rec.validation {
                row("validation", v);
            }
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

fn stack_batch(samples: &[&Sample]) -> Result<(Array4<f32>, Array4<f32>)> {
    let views_x: Vec<_> = samples.iter().map(|s| s.x.view()).collect();
    let views_y: Vec<_> = samples.iter().map(|s| s.y.view()).collect();
    let x = ndarray::stack(Axis(0), &views_x)
        .map_err(|e| Error::ShapeMismatch(format!("batch stack: {e}")))?;
    let y = ndarray::stack(Axis(0), &views_y)
        .map_err(|e| Error::ShapeMismatch(format!("batch stack: {e}")))?;
    Ok((x, y))
}

fn batch_metrics(probs: &Array4<f32>, targets: &Array4<f32>, eps: f64) -> Result<MetricSet> {
    let p = probs.as_slice().expect("standard layout");
    let g = targets.as_slice().expect("standard layout");
    let dice = dice_coeff(p, g, eps)?;
    Ok(MetricSet {
        dice,
        jaccard: jaccard_coeff(p, g, eps)?,
        iou: iou_hard(p, g, 0.5)?,
        binary_accuracy: binary_accuracy(p, g, 0.5)?,
        loss: 1.0 - dice,
    })
}

fn mean_metrics(sets: &[MetricSet]) -> MetricSet {
    let n = sets.len().max(1) as f64;
    MetricSet {
        dice: sets.iter().map(|s| s.dice).sum::<f64>() / n,
        jaccard: sets.iter().map(|s| s.jaccard).sum::<f64>() / n,
        iou: sets.iter().map(|s| s.iou).sum::<f64>() / n,
        binary_accuracy: sets.iter().map(|s| s.binary_accuracy).sum::<f64>() / n,
        loss: sets.iter().map(|s| s.loss).sum::<f64>() / n,
    }
}

/// Evaluate a model over samples in batches; metrics are means of per-batch
/// (batch-global) values.
pub fn evaluate(
    params: &ModelParams<f32>,
    model_cfg: &ModelConfig,
    samples: &[&Sample],
    batch_size: usize,
    eps: f64,
) -> Result<MetricSet> {
    let mut sets = Vec::new();
    for chunk in samples.chunks(batch_size.max(1)) {
        let (x, y) = stack_batch(chunk)?;
        let probs = forward(params, model_cfg, &x)?;
        sets.push(batch_metrics(&probs, &y, eps)?);
    }
    Ok(mean_metrics(&sets))
}

/// Core training engine. Splits the dataset by seed, runs shuffled
/// mini-batches (final incomplete batch kept), steps Adam once per batch,
/// and calls `post_step` after every optimizer step. Existing `params` are
/// trained in place.
pub fn fit(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    params: &mut ModelParams<f32>,
    mut post_step: impl FnMut(u64, &mut ModelParams<f32>) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    model_cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidConfig("dataset is empty".into()));
    }
    let n = dataset.len();
    let n_val = ((n as f64) * cfg.validation_fraction).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut rng);
    let (train_idx, val_idx) = indices.split_at(n - n_val);
    let mut train_idx = train_idx.to_vec();
    if train_idx.is_empty() {
        return Err(Error::InvalidConfig(
            "validation fraction leaves no training samples".into(),
        ));
    }
    let val_samples: Vec<&Sample> = val_idx.iter().map(|i| &dataset.samples[*i]).collect();

    let hyper = cfg.adam();
    let mut state = AdamState::new(params);
    let mut t: u64 = 0;
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        train_idx.shuffle(&mut rng);
        let mut sets = Vec::new();
        for chunk in train_idx.chunks(cfg.batch_size) {
            let samples: Vec<&Sample> = chunk.iter().map(|i| &dataset.samples[*i]).collect();
            let (x, y) = stack_batch(&samples)?;
            let cache = forward_cached(params, model_cfg, &x)?;
            sets.push(batch_metrics(&cache.probs, &y, cfg.dice_smooth)?);
            let (grads, _) = backward_from_cache(params, model_cfg, &cache, &y, cfg.dice_smooth)?;
            t += 1;
            adam_step(params, &grads, &mut state, t, &hyper)?;
            post_step(t, params)?;
        }
        let train = mean_metrics(&sets);
        let validation = if val_samples.is_empty() {
            None
        } else {
            Some(evaluate(
                params,
                model_cfg,
                &val_samples,
                cfg.batch_size,
                cfg.dice_smooth,
            )?)
        };
        report.epochs.push(EpochRecord {
            epoch,
            train,
            validation,
        });
        if let Some(stop) = cfg.early_stop_train_dice {
            if train.dice > stop {
                break;
            }
        }
    }
    Ok(report)
}

/// Train a freshly initialized model.
pub fn train(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(ModelParams<f32>, TrainReport)> {
    let mut params = ModelParams::<f32>::init(model_cfg, cfg.seed)?;
    let report = fit(dataset, model_cfg, cfg, &mut params, |_, _| Ok(()))?;
    Ok((params, report))
}
