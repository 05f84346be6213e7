//! Inference latency accounting: repeated timed passes over one batch, with
//! per-image latency and milliseconds per square kilometer of ground
//! coverage.

use std::time::Instant;

use ndarray::{Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segnet::{forward, ModelConfig, ModelParams};
use crate::water::{Chip, CHIP_SIZE};

fn default_batch() -> usize {
    8
}
fn default_runs() -> usize {
    5
}
fn default_warmup() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchOptions {
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_runs")]
    pub runs: usize,
    /// Unrecorded passes before timing starts.
    #[serde(default = "default_warmup")]
    pub warmup: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            batch: default_batch(),
            runs: default_runs(),
            warmup: default_warmup(),
        }
    }
}

/// Latency report. `runs` holds wall seconds per timed batch pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub runs: Vec<f64>,
    pub batch_size: usize,
    pub warmup: usize,
    pub mean_per_image_s: f64,
    pub ms_per_sqkm: f64,
    pub chip_gsd_m: f64,
    pub chip_area_km2: f64,
}

/// Pure arithmetic from timing samples:
/// mean_per_image = mean(runs) / batch;
/// chip_area_km2 = (256 * gsd)^2 / 1e6;
/// ms_per_sqkm = 1000 * mean_per_image / chip_area.
pub fn report_from_runs(
    runs: Vec<f64>,
    batch_size: usize,
    warmup: usize,
    chip_gsd_m: f64,
) -> Result<BenchReport> {
    if runs.is_empty() {
        return Err(Error::InvalidConfig("no timing runs".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be positive".into()));
    }
    if !(chip_gsd_m > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "chip gsd must be positive, got {chip_gsd_m}"
        )));
    }
    let mean_run = runs.iter().sum::<f64>() / runs.len() as f64;
    let mean_per_image_s = mean_run / batch_size as f64;
    let side_m = CHIP_SIZE as f64 * chip_gsd_m;
    let chip_area_km2 = side_m * side_m / 1e6;
    Ok(BenchReport {
        runs,
        batch_size,
        warmup,
        mean_per_image_s,
        ms_per_sqkm: 1000.0 * mean_per_image_s / chip_area_km2,
        chip_gsd_m,
        chip_area_km2,
    })
}

fn chip_batch(chips: &[Chip], batch: usize) -> Result<Array4<f32>> {
    if chips.len() < batch {
        return Err(Error::InvalidConfig(format!(
            "need at least {batch} chips, have {}",
            chips.len()
        )));
    }
    let mut samples = Vec::with_capacity(batch);
    for chip in &chips[..batch] {
        let mut x = Array3::<f32>::zeros((CHIP_SIZE, CHIP_SIZE, 4));
        for c in 0..4 {
            let ch = chip.channel(c);
            for r in 0..CHIP_SIZE {
                for col in 0..CHIP_SIZE {
                    x[(r, col, c)] = ch[r * CHIP_SIZE + col];
                }
            }
        }
        samples.push(x);
    }
    let views: Vec<_> = samples.iter().map(|s| s.view()).collect();
    ndarray::stack(Axis(0), &views).map_err(|e| Error::ShapeMismatch(format!("batch stack: {e}")))
}

/// Benchmark with an injectable clock returning seconds. The same batch is
/// used for every pass; warmup passes are not recorded.
pub fn bench_infer_with_clock(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    chips: &[Chip],
    opts: &BenchOptions,
    clock: &mut dyn FnMut() -> f64,
) -> Result<BenchReport> {
    if opts.runs == 0 {
        return Err(Error::InvalidConfig("runs must be positive".into()));
    }
    let batch = chip_batch(chips, opts.batch)?;
    let gsd = chips[0].geo.pixel_size_x;
    for _ in 0..opts.warmup {
        forward(params, cfg, &batch)?;
    }
    let mut runs = Vec::with_capacity(opts.runs);
    for _ in 0..opts.runs {
        let t0 = clock();
        forward(params, cfg, &batch)?;
        runs.push(clock() - t0);
    }
    report_from_runs(runs, opts.batch, opts.warmup, gsd)
}

/// Benchmark against the monotonic system clock.
pub fn bench_infer(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    chips: &[Chip],
    opts: &BenchOptions,
) -> Result<BenchReport> {
    let start = Instant::now();
    let mut clock = move || start.elapsed().as_secs_f64();
    bench_infer_with_clock(params, cfg, chips, opts, &mut clock)
}
