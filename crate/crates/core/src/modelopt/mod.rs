//! Model compression: polynomial-decay pruning schedule, magnitude pruning
//! with fine-tuning, symmetric int8 post-training quantization, and the size
//! ledger comparing dense / sparse / quantized encodings.

pub mod container;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segnet::train::{fit, Dataset, TrainConfig, TrainReport};
use crate::segnet::{ModelConfig, ModelParams};

fn default_initial_sparsity() -> f64 {
    0.2
}
fn default_final_sparsity() -> f64 {
    0.8
}
fn default_end_step() -> u64 {
    5000
}
fn default_power() -> f64 {
    3.0
}

/// Polynomial-decay sparsity ramp.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PruneSchedule {
    #[serde(default = "default_initial_sparsity")]
    pub initial_sparsity: f64,
    #[serde(default = "default_final_sparsity")]
    pub final_sparsity: f64,
    #[serde(default)]
    pub begin_step: u64,
    #[serde(default = "default_end_step")]
    pub end_step: u64,
    #[serde(default = "default_power")]
    pub power: f64,
}

impl Default for PruneSchedule {
    fn default() -> Self {
        PruneSchedule {
            initial_sparsity: default_initial_sparsity(),
            final_sparsity: default_final_sparsity(),
            begin_step: 0,
            end_step: default_end_step(),
            power: default_power(),
        }
    }
}

impl PruneSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.initial_sparsity
            && self.initial_sparsity <= self.final_sparsity
            && self.final_sparsity < 1.0)
        {
            return Err(Error::InvalidConfig(format!(
                "sparsity bounds must satisfy 0 <= initial <= final < 1, got {} / {}",
                self.initial_sparsity, self.final_sparsity
            )));
        }
        if self.begin_step > self.end_step {
            return Err(Error::InvalidConfig(format!(
                "begin_step {} > end_step {}",
                self.begin_step, self.end_step
            )));
        }
        Ok(())
    }
}

/// Sparsity target at an optimizer step:
/// s(t) = s_f + (s_i - s_f) * (1 - clamp((t - t0)/(t1 - t0), 0, 1))^power.
pub fn sparsity_at(step: u64, sched: &PruneSchedule) -> f64 {
    let progress = if sched.end_step == sched.begin_step {
        if step >= sched.end_step {
            1.0
        } else {
            0.0
        }
    } else {
        ((step.saturating_sub(sched.begin_step)) as f64
            / (sched.end_step - sched.begin_step) as f64)
            .clamp(0.0, 1.0)
    };
    // endpoints are exact by definition
    if progress == 0.0 {
        sched.initial_sparsity
    } else if progress == 1.0 {
        sched.final_sparsity
    } else {
        sched.final_sparsity
            + (sched.initial_sparsity - sched.final_sparsity) * (1.0 - progress).powf(sched.power)
    }
}

/// Positions zeroed by pruning, per prunable tensor (true = pruned).
#[derive(Debug, Clone, Default)]
pub struct PruneMasks {
    pub masks: Vec<(String, ArrayD<bool>)>,
}

impl PruneMasks {
    pub fn pruned_count(&self) -> usize {
        self.masks
            .iter()
            .map(|(_, m)| m.iter().filter(|v| **v).count())
            .sum()
    }

    fn union_with(&mut self, other: &PruneMasks) {
        for (name, m) in &other.masks {
            match self.masks.iter_mut().find(|(n, _)| n == name) {
                Some((_, mine)) => ndarray::Zip::from(mine).and(m).for_each(|a, b| *a = *a || *b),
                None => self.masks.push((name.clone(), m.clone())),
            }
        }
    }
}

fn prunable(name: &str, tensor: &ArrayD<f32>) -> bool {
    // conv kernels only; biases are exempt
    tensor.ndim() >= 2 && !name.ends_with(".bias")
}

/// Zero the ceil(target * n) smallest-magnitude weights of every prunable
/// tensor (ties broken by lowest flat index; existing zeros count toward the
/// quota). Returns the pruned positions.
pub fn prune_to_sparsity(params: &mut ModelParams<f32>, target: f64) -> Result<PruneMasks> {
    if !(0.0..1.0).contains(&target) {
        return Err(Error::InvalidConfig(format!(
            "target sparsity must be in [0, 1), got {target}"
        )));
    }
    let mut masks = PruneMasks::default();
    for (name, tensor) in params.iter_mut() {
        if !prunable(name, tensor) {
            continue;
        }
        let n = tensor.len();
        let quota = ((target * n as f64).ceil() as usize).min(n);
        let mut mask = ArrayD::from_elem(tensor.raw_dim(), false);
        if quota > 0 {
            let flat = tensor.as_slice_mut().expect("parameters are contiguous");
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_unstable_by(|a, b| {
                flat[*a]
                    .abs()
                    .total_cmp(&flat[*b].abs())
                    .then(a.cmp(b))
            });
            let mask_flat = mask.as_slice_mut().expect("mask is contiguous");
            for &i in order.iter().take(quota) {
                flat[i] = 0.0;
                mask_flat[i] = true;
            }
        }
        masks.masks.push((name.to_string(), mask));
    }
    Ok(masks)
}

/// Force every masked position back to exactly zero.
pub fn apply_masks(params: &mut ModelParams<f32>, masks: &PruneMasks) -> Result<()> {
    for (name, mask) in &masks.masks {
        let tensor = params.get_mut(name)?;
        ndarray::Zip::from(tensor).and(mask).for_each(|w, m| {
            if *m {
                *w = 0.0;
            }
        });
    }
    Ok(())
}

/// Fraction of exactly-zero weights per prunable tensor.
pub fn zero_fractions(params: &ModelParams<f32>) -> Vec<(String, f64)> {
    params
        .iter()
        .filter(|(n, t)| prunable(n, t))
        .map(|(n, t)| {
            let zeros = t.iter().filter(|v| **v == 0.0).count();
            (n.to_string(), zeros as f64 / t.len() as f64)
        })
        .collect()
}

/// Fine-tune with the pruning schedule: after every Adam step t, re-prune to
/// sparsity_at(t) and reapply the cumulative masks so pruned weights stay
/// zero. Returns the training report; `params` end at the schedule's value
/// for the final step.
pub fn prune_finetune(
    params: &mut ModelParams<f32>,
    dataset: &Dataset,
    sched: &PruneSchedule,
    epochs: usize,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<TrainReport> {
    sched.validate()?;
    let cfg = TrainConfig {
        epochs,
        ..train_cfg.clone()
    };
    let mut cumulative = PruneMasks::default();
    let report = fit(dataset, model_cfg, &cfg, params, |t, p| {
        apply_masks(p, &cumulative)?;
        let fresh = prune_to_sparsity(p, sparsity_at(t, sched))?;
        cumulative.union_with(&fresh);
        Ok(())
    })?;
    Ok(report)
}

/// Symmetric per-tensor int8 quantization of one tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantTensor {
    pub name: String,
    pub shape: Vec<usize>,
    /// Dequantization scale, > 0; zero point is always 0.
    pub scale: f32,
    pub values: Vec<i8>,
}

/// Quantize every tensor: scale = max|w| / 127 (1 for an all-zero tensor),
/// q = clamp(round_half_to_even(w / scale), -127, 127).
pub fn quantize_params(params: &ModelParams<f32>) -> Result<Vec<QuantTensor>> {
    params.check_finite()?;
    Ok(params
        .iter()
        .map(|(name, t)| {
            let amax = t.iter().fold(0f32, |a, v| a.max(v.abs()));
            let scale = if amax == 0.0 { 1.0 } else { amax / 127.0 };
            let values = t
                .iter()
                .map(|w| (w / scale).round_ties_even().clamp(-127.0, 127.0) as i8)
                .collect();
            QuantTensor {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                scale,
                values,
            }
        })
        .collect())
}

/// Dequantize one tensor back to float32: values * scale.
pub fn dequantize(qt: &QuantTensor) -> Result<ArrayD<f32>> {
    let data: Vec<f32> = qt.values.iter().map(|q| *q as f32 * qt.scale).collect();
    ArrayD::from_shape_vec(ndarray::IxDyn(&qt.shape), data).map_err(|e| {
        Error::ShapeMismatch(format!("quantized tensor {}: {e}", qt.name))
    })
}

/// Dequantize a whole model; inference with the result is the "quantized
/// model" path.
pub fn dequantize_model(tensors: &[QuantTensor]) -> Result<ModelParams<f32>> {
    ModelParams::from_tensors(
        tensors
            .iter()
            .map(|qt| Ok((qt.name.clone(), dequantize(qt)?)))
            .collect::<Result<Vec<_>>>()?,
    )
}

/// Byte accounting for one tensor under each encoding.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorSizes {
    pub name: String,
    pub weights: usize,
    pub sparsity: f64,
    pub dense_f32_bytes: u64,
    pub sparse_encoded_bytes: u64,
    pub quantized_i8_bytes: u64,
}

/// Size ledger across encodings (payload bytes only, headers and scales
/// excluded).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SizeReport {
    pub tensors: Vec<TensorSizes>,
    pub total_dense_f32_bytes: u64,
    pub total_sparse_encoded_bytes: u64,
    pub total_quantized_i8_bytes: u64,
    pub overall_sparsity: f64,
}

/// Account payload bytes per encoding: dense 4 bytes/weight, sparse 8 bytes
/// per nonzero (u32 index + f32 value), quantized 1 byte/weight.
pub fn size_report(params: &ModelParams<f32>) -> SizeReport {
    let mut tensors = Vec::new();
    let mut total_weights = 0u64;
    let mut total_zeros = 0u64;
    for (name, t) in params.iter() {
        let n = t.len();
        let zeros = t.iter().filter(|v| **v == 0.0).count();
        let nonzeros = n - zeros;
        total_weights += n as u64;
        total_zeros += zeros as u64;
        tensors.push(TensorSizes {
            name: name.to_string(),
            weights: n,
            sparsity: zeros as f64 / n as f64,
            dense_f32_bytes: 4 * n as u64,
            sparse_encoded_bytes: 8 * nonzeros as u64,
            quantized_i8_bytes: n as u64,
        });
    }
    SizeReport {
        total_dense_f32_bytes: tensors.iter().map(|t| t.dense_f32_bytes).sum(),
        total_sparse_encoded_bytes: tensors.iter().map(|t| t.sparse_encoded_bytes).sum(),
        total_quantized_i8_bytes: tensors.iter().map(|t| t.quantized_i8_bytes).sum(),
        overall_sparsity: if total_weights == 0 {
            0.0
        } else {
            total_zeros as f64 / total_weights as f64
        },
        tensors,
    }
}
