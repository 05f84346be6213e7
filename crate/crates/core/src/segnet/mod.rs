//! Compact residual U-Net for water segmentation, with from-scratch forward
//! and reverse-mode passes.
//!
//! Encoder: per level, a residual block (two 3x3 convs with an identity or
//! 1x1-projection shortcut, ReLU) followed by 2x2 max pooling. A residual
//! bottleneck sits at the deepest level. Decoder: per level, 2x nearest
//! upsample + 3x3 conv, concatenation with the skip connection, then a
//! residual block. Head: 1x1 conv + sigmoid.

pub mod adam;
pub mod metrics;
pub mod ops;
pub mod train;

use ndarray::{Array4, ArrayD, IxDyn};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use ops::{
    concat_channels, conv2d, conv2d_grads, maxpool2, maxpool2_grad, relu, relu_grad_inplace,
    sigmoid, split_channels, upsample2, upsample2_grad, Scalar,
};

fn default_levels() -> usize {
    3
}
fn default_base_filters() -> usize {
    8
}
fn default_in_channels() -> usize {
    4
}

/// Architecture hyperparameters. Input spatial dims must be divisible by
/// 2^levels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "default_levels")]
    pub levels: usize,
    #[serde(default = "default_base_filters")]
    pub base_filters: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            levels: default_levels(),
            base_filters: default_base_filters(),
            in_channels: default_in_channels(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.base_filters == 0 || self.in_channels == 0 {
            return Err(Error::InvalidConfig(
                "levels, base_filters and in_channels must be positive".into(),
            ));
        }
        Ok(())
    }

    fn enc_in(&self, level: usize) -> usize {
        if level == 0 {
            self.in_channels
        } else {
            self.base_filters << (level - 1)
        }
    }

    fn enc_out(&self, level: usize) -> usize {
        self.base_filters << level
    }

    /// Ordered (name, shape) of every parameter tensor.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        fn block(specs: &mut Vec<(String, Vec<usize>)>, prefix: &str, cin: usize, cout: usize) {
            specs.push((format!("{prefix}.conv1.weight"), vec![3, 3, cin, cout]));
            specs.push((format!("{prefix}.conv1.bias"), vec![cout]));
            specs.push((format!("{prefix}.conv2.weight"), vec![3, 3, cout, cout]));
            specs.push((format!("{prefix}.conv2.bias"), vec![cout]));
            if cin != cout {
                specs.push((format!("{prefix}.proj.weight"), vec![1, 1, cin, cout]));
                specs.push((format!("{prefix}.proj.bias"), vec![cout]));
            }
        }
        let mut specs: Vec<(String, Vec<usize>)> = Vec::new();
        for i in 0..self.levels {
            block(&mut specs, &format!("enc{i}"), self.enc_in(i), self.enc_out(i));
        }
        block(
            &mut specs,
            "bottleneck",
            self.enc_out(self.levels - 1),
            self.base_filters << self.levels,
        );
        for i in (0..self.levels).rev() {
            let c = self.base_filters << i;
            specs.push((format!("dec{i}.up.weight"), vec![3, 3, c * 2, c]));
            specs.push((format!("dec{i}.up.bias"), vec![c]));
            block(&mut specs, &format!("dec{i}"), c * 2, c);
        }
        specs.push(("head.weight".to_string(), vec![1, 1, self.base_filters, 1]));
        specs.push(("head.bias".to_string(), vec![1]));
        specs
    }
}

/// Named, ordered parameter tensors of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams<F> {
    tensors: Vec<(String, ArrayD<F>)>,
}

impl<F: Scalar> ModelParams<F> {
    /// Glorot-uniform kernels (+-sqrt(6/(fan_in+fan_out))), zero biases,
    /// drawn from a seeded generator in parameter order.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = cfg
            .param_specs()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let arr = if shape.len() == 1 {
                    ArrayD::zeros(IxDyn(&shape))
                } else {
                    let (kh, kw, cin, cout) = (shape[0], shape[1], shape[2], shape[3]);
                    let bound = (6.0 / ((kh * kw * cin + kh * kw * cout) as f64)).sqrt();
                    let vals: Vec<F> = (0..n)
                        .map(|_| F::from_f64_lossy((rng.random::<f64>() * 2.0 - 1.0) * bound))
                        .collect();
                    ArrayD::from_shape_vec(IxDyn(&shape), vals).expect("shape matches count")
                };
                (name, arr)
            })
            .collect();
        Ok(ModelParams { tensors })
    }

    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(ModelParams {
            tensors: cfg
                .param_specs()
                .into_iter()
                .map(|(name, shape)| (name, ArrayD::zeros(IxDyn(&shape))))
                .collect(),
        })
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), ArrayD::zeros(t.raw_dim())))
                .collect(),
        }
    }

    /// Build from explicit tensors; validates uniqueness and finiteness.
    pub fn from_tensors(tensors: Vec<(String, ArrayD<F>)>) -> Result<Self> {
        for (i, (name, t)) in tensors.iter().enumerate() {
            if tensors[..i].iter().any(|(n, _)| n == name) {
                return Err(Error::InvalidConfig(format!("duplicate tensor name {name}")));
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("tensor {name}")));
            }
        }
        Ok(ModelParams { tensors })
    }

    /// Check shapes against a config's parameter map.
    pub fn validate_against(&self, cfg: &ModelConfig) -> Result<()> {
        let specs = cfg.param_specs();
        if specs.len() != self.tensors.len() {
            return Err(Error::ShapeMismatch(format!(
                "model has {} tensors, config expects {}",
                self.tensors.len(),
                specs.len()
            )));
        }
        for ((name, shape), (tname, t)) in specs.iter().zip(&self.tensors) {
            if name != tname || t.shape() != &shape[..] {
                return Err(Error::ShapeMismatch(format!(
                    "tensor {tname} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<F>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::InvalidConfig(format!("no tensor named {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ArrayD<F>> {
        self.tensors
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::InvalidConfig(format!("no tensor named {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<F>)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<F>)> {
        self.tensors.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_weights(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in &self.tensors {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("tensor {name}")));
            }
        }
        Ok(())
    }

    pub fn map_values<G: Scalar>(&self, f: impl Fn(F) -> G) -> ModelParams<G> {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), t.mapv(|v| f(v))))
                .collect(),
        }
    }
}

impl ModelParams<f32> {
    pub fn to_f64(&self) -> ModelParams<f64> {
        self.map_values(|v| v as f64)
    }
}

impl ModelParams<f64> {
    pub fn to_f32(&self) -> ModelParams<f32> {
        self.map_values(|v| v as f32)
    }
}

struct BlockParams<'a, F> {
    w1: &'a ArrayD<F>,
    b1: &'a ArrayD<F>,
    w2: &'a ArrayD<F>,
    b2: &'a ArrayD<F>,
    proj: Option<(&'a ArrayD<F>, &'a ArrayD<F>)>,
}

fn block_params<'a, F: Scalar>(
    params: &'a ModelParams<F>,
    prefix: &str,
) -> Result<BlockParams<'a, F>> {
    let proj = match params.get(&format!("{prefix}.proj.weight")) {
        Ok(w) => Some((w, params.get(&format!("{prefix}.proj.bias"))?)),
        Err(_) => None,
    };
    Ok(BlockParams {
        w1: params.get(&format!("{prefix}.conv1.weight"))?,
        b1: params.get(&format!("{prefix}.conv1.bias"))?,
        w2: params.get(&format!("{prefix}.conv2.weight"))?,
        b2: params.get(&format!("{prefix}.conv2.bias"))?,
        proj,
    })
}

/// Per-block activations retained for the reverse pass.
struct BlockCache<F> {
    x: Array4<F>,
    h: Array4<F>,
    out: Array4<F>,
}

fn block_forward<F: Scalar>(p: &BlockParams<'_, F>, x: Array4<F>) -> Result<(Array4<F>, BlockCache<F>)> {
    let y1 = conv2d(&x, &p.w1.view(), &p.b1.view())?;
    let h = relu(&y1);
    let y2 = conv2d(&h, &p.w2.view(), &p.b2.view())?;
    let z = match &p.proj {
        Some((w, b)) => y2 + conv2d(&x, &w.view(), &b.view())?,
        None => y2 + &x,
    };
    let out = relu(&z);
    Ok((
        out.clone(),
        BlockCache { x, h, out },
    ))
}

fn block_backward<F: Scalar>(
    p: &BlockParams<'_, F>,
    prefix: &str,
    cache: &BlockCache<F>,
    mut g_out: Array4<F>,
    grads: &mut ModelParams<F>,
) -> Result<Array4<F>> {
    relu_grad_inplace(&mut g_out, &cache.out); // g_z
    let (mut g_h, gw2, gb2) = conv2d_grads(&cache.h, &p.w2.view(), &g_out)?;
    *grads.get_mut(&format!("{prefix}.conv2.weight"))? = gw2;
    *grads.get_mut(&format!("{prefix}.conv2.bias"))? = gb2;
    let g_x_short = match &p.proj {
        Some((w, _)) => {
            let (gx, gwp, gbp) = conv2d_grads(&cache.x, &w.view(), &g_out)?;
            *grads.get_mut(&format!("{prefix}.proj.weight"))? = gwp;
            *grads.get_mut(&format!("{prefix}.proj.bias"))? = gbp;
            gx
        }
        None => g_out.clone(),
    };
    relu_grad_inplace(&mut g_h, &cache.h); // g_y1
    let (g_x_main, gw1, gb1) = conv2d_grads(&cache.x, &p.w1.view(), &g_h)?;
    *grads.get_mut(&format!("{prefix}.conv1.weight"))? = gw1;
    *grads.get_mut(&format!("{prefix}.conv1.bias"))? = gb1;
    Ok(g_x_main + g_x_short)
}

/// Activations of one full forward pass, consumed by the reverse pass.
pub struct ForwardCache<F> {
    enc_blocks: Vec<BlockCache<F>>,
    pool_idx: Vec<Vec<u8>>,
    pool_in_shapes: Vec<(usize, usize, usize, usize)>,
    bottleneck: BlockCache<F>,
    /// Per decoder level, in processing order (deepest first):
    /// the upsampled tensor fed to the up conv.
    dec_upsampled: Vec<Array4<F>>,
    dec_blocks: Vec<BlockCache<F>>,
    head_in: Array4<F>,
    /// Sigmoid outputs, [n, h, w, 1].
    pub probs: Array4<F>,
}

fn check_batch<F: Scalar>(cfg: &ModelConfig, batch: &Array4<F>) -> Result<()> {
    cfg.validate()?;
    let (n, h, w, c) = batch.dim();
    if n == 0 {
        return Err(Error::ShapeMismatch("empty batch".into()));
    }
    if c != cfg.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "batch has {c} channels, model expects {}",
            cfg.in_channels
        )));
    }
    let div = 1usize << cfg.levels;
    if h % div != 0 || w % div != 0 {
        return Err(Error::ShapeMismatch(format!(
            "spatial dims {h}x{w} must be divisible by 2^levels = {div}"
        )));
    }
    if batch.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("model input batch".into()));
    }
    Ok(())
}

/// Forward pass retaining every activation needed for the reverse pass.
pub fn forward_cached<F: Scalar>(
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    batch: &Array4<F>,
) -> Result<ForwardCache<F>> {
    check_batch(cfg, batch)?;
    params.validate_against(cfg)?;

    let mut enc_blocks = Vec::with_capacity(cfg.levels);
    let mut pool_idx = Vec::with_capacity(cfg.levels);
    let mut pool_in_shapes = Vec::with_capacity(cfg.levels);
    let mut feat = batch.clone();
    for i in 0..cfg.levels {
        let p = block_params(params, &format!("enc{i}"))?;
        let (out, cache) = block_forward(&p, feat)?;
        pool_in_shapes.push(out.dim());
        let (pooled, idx) = maxpool2(&out)?;
        enc_blocks.push(cache);
        pool_idx.push(idx);
        feat = pooled;
    }
    let (mut feat, bottleneck) = {
        let p = block_params(params, "bottleneck")?;
        block_forward(&p, feat)?
    };

    let mut dec_upsampled = Vec::with_capacity(cfg.levels);
    let mut dec_blocks = Vec::with_capacity(cfg.levels);
    for i in (0..cfg.levels).rev() {
        let up = upsample2(&feat);
        let v = conv2d(
            &up,
            &params.get(&format!("dec{i}.up.weight"))?.view(),
            &params.get(&format!("dec{i}.up.bias"))?.view(),
        )?;
        dec_upsampled.push(up);
        let skip = &enc_blocks[i].out;
        let cat = concat_channels(&v, skip)?;
        let p = block_params(params, &format!("dec{i}"))?;
        let (out, cache) = block_forward(&p, cat)?;
        dec_blocks.push(cache);
        feat = out;
    }

    let logits = conv2d(
        &feat,
        &params.get("head.weight")?.view(),
        &params.get("head.bias")?.view(),
    )?;
    let probs = sigmoid(&logits);
    Ok(ForwardCache {
        enc_blocks,
        pool_idx,
        pool_in_shapes,
        bottleneck,
        dec_upsampled,
        dec_blocks,
        head_in: feat,
        probs,
    })
}

/// Forward pass: sigmoid probabilities in (0,1), shape [n, h, w, 1].
pub fn forward<F: Scalar>(
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    batch: &Array4<F>,
) -> Result<Array4<F>> {
    Ok(forward_cached(params, cfg, batch)?.probs)
}

fn check_targets<F: Scalar>(probs: &Array4<F>, targets: &Array4<F>) -> Result<()> {
    if probs.dim() != targets.dim() {
        return Err(Error::ShapeMismatch(format!(
            "probs {:?} vs targets {:?}",
            probs.dim(),
            targets.dim()
        )));
    }
    Ok(())
}

/// Reverse pass from a cached forward: exact gradients of the Dice loss
/// w.r.t. every parameter tensor, plus the loss value.
pub fn backward_from_cache<F: Scalar>(
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    cache: &ForwardCache<F>,
    targets: &Array4<F>,
    dice_eps: f64,
) -> Result<(ModelParams<F>, f64)> {
    check_targets(&cache.probs, targets)?;
    let mut grads = params.zeros_like();

    // dL/dp for L = 1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps)
    let p_flat = cache.probs.as_slice().expect("standard layout");
    let g_flat = targets.as_slice().ok_or_else(|| {
        Error::ShapeMismatch("targets must be in standard layout".into())
    })?;
    let mut sp = 0f64;
    let mut sg = 0f64;
    let mut spg = 0f64;
    for (p, g) in p_flat.iter().zip(g_flat) {
        let p = p.to_f64().unwrap_or(0.0);
        let g = g.to_f64().unwrap_or(0.0);
        sp += p;
        sg += g;
        spg += p * g;
    }
    let denom = sp + sg + dice_eps;
    let numer = 2.0 * spg + dice_eps;
    let loss = 1.0 - numer / denom;
    let denom2 = denom * denom;

    // g_logits = dL/dp * p * (1 - p)
    let mut g_feat = Array4::<F>::zeros(cache.probs.raw_dim());
    {
        let gs = g_feat.as_slice_mut().unwrap();
        for i in 0..gs.len() {
            let p = p_flat[i].to_f64().unwrap_or(0.0);
            let g = g_flat[i].to_f64().unwrap_or(0.0);
            let dl_dp = -(2.0 * g * denom - numer) / denom2;
            gs[i] = F::from_f64_lossy(dl_dp * p * (1.0 - p));
        }
    }

    // head
    let (mut g, gw, gb) = conv2d_grads(&cache.head_in, &params.get("head.weight")?.view(), &g_feat)?;
    *grads.get_mut("head.weight")? = gw;
    *grads.get_mut("head.bias")? = gb;

    // decoder, reverse of processing order: level 0 was processed last
    let mut skip_grads: Vec<Option<Array4<F>>> = (0..cfg.levels).map(|_| None).collect();
    for (pos, i) in (0..cfg.levels).enumerate() {
        // processing order was [levels-1, ..., 0]; reverse positions
        let cache_pos = cfg.levels - 1 - pos;
        let prefix = format!("dec{i}");
        let p = block_params(params, &prefix)?;
        let g_cat = block_backward(&p, &prefix, &cache.dec_blocks[cache_pos], g, &mut grads)?;
        let c = cfg.base_filters << i;
        let (g_v, g_skip) = split_channels(&g_cat, c);
        skip_grads[i] = Some(g_skip);
        let up = &cache.dec_upsampled[cache_pos];
        let (g_up, gw, gb) = conv2d_grads(up, &params.get(&format!("{prefix}.up.weight"))?.view(), &g_v)?;
        *grads.get_mut(&format!("{prefix}.up.weight"))? = gw;
        *grads.get_mut(&format!("{prefix}.up.bias"))? = gb;
        g = upsample2_grad(&g_up);
    }

    // bottleneck
    let p = block_params(params, "bottleneck")?;
    let mut g_feat = block_backward(&p, "bottleneck", &cache.bottleneck, g, &mut grads)?;

    // encoder, deepest level first
    for i in (0..cfg.levels).rev() {
        let g_pool = maxpool2_grad(&g_feat, &cache.pool_idx[i], cache.pool_in_shapes[i]);
        let g_block_out = match skip_grads[i].take() {
            Some(gs) => g_pool + gs,
            None => g_pool,
        };
        let prefix = format!("enc{i}");
        let p = block_params(params, &prefix)?;
        g_feat = block_backward(&p, &prefix, &cache.enc_blocks[i], g_block_out, &mut grads)?;
    }

    for (name, t) in grads.iter() {
        if t.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    Ok((grads, loss))
}

/// Forward + reverse in one call: gradients of the Dice loss and the loss.
pub fn backward<F: Scalar>(
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    batch: &Array4<F>,
    targets: &Array4<F>,
    dice_eps: f64,
) -> Result<(ModelParams<F>, f64)> {
    let cache = forward_cached(params, cfg, batch)?;
    backward_from_cache(params, cfg, &cache, targets, dice_eps)
}
