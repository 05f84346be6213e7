//! Sensor simulator: resample to the target ground sampling distance,
//! misalign bands, convolve with the system point spread function, convert
//! radiance to top-of-atmosphere reflectance, and tile the product.
//!
//! Every stage is a pure function of (input, config, seed); random draws are
//! made once, up front, in raster band order.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Band, Raster};

/// Point spread function, either an explicit kernel or a Gaussian recipe.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PsfSpec {
    /// Odd-sided square grid of nonnegative weights, row-major.
    Kernel { side: usize, weights: Vec<f64> },
    /// Sampled Gaussian, side = 2 * radius_px + 1.
    Gaussian { sigma_px: f64, radius_px: usize },
}

impl Default for PsfSpec {
    fn default() -> Self {
        PsfSpec::Gaussian {
            sigma_px: 1.0,
            radius_px: 3,
        }
    }
}

/// A validated, normalized convolution kernel.
#[derive(Debug, Clone)]
pub struct Kernel2d {
    pub side: usize,
    pub weights: Vec<f64>,
}

impl PsfSpec {
    pub fn realize(&self) -> Result<Kernel2d> {
        let (side, mut weights) = match self {
            PsfSpec::Kernel { side, weights } => (*side, weights.clone()),
            PsfSpec::Gaussian { sigma_px, radius_px } => {
                if !(*sigma_px > 0.0) {
                    return Err(Error::InvalidConfig(format!(
                        "gaussian psf sigma must be positive, got {sigma_px}"
                    )));
                }
                let side = 2 * radius_px + 1;
                let mut w = Vec::with_capacity(side * side);
                for y in 0..side {
                    for x in 0..side {
                        let dy = y as f64 - *radius_px as f64;
                        let dx = x as f64 - *radius_px as f64;
                        w.push((-(dx * dx + dy * dy) / (2.0 * sigma_px * sigma_px)).exp());
                    }
                }
                (side, w)
            }
        };
        if side % 2 == 0 || side == 0 {
            return Err(Error::InvalidConfig(format!(
                "psf kernel side must be odd, got {side}"
            )));
        }
        if weights.len() != side * side {
            return Err(Error::InvalidConfig(format!(
                "psf kernel has {} weights, expected {}",
                weights.len(),
                side * side
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidConfig(
                "psf kernel weights must be finite and nonnegative".into(),
            ));
        }
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 {
            return Err(Error::InvalidConfig("psf kernel sums to zero".into()));
        }
        for w in &mut weights {
            *w /= sum;
        }
        Ok(Kernel2d { side, weights })
    }
}

/// Solar inputs for the radiance-to-reflectance conversion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolarGeometry {
    /// Exo-atmospheric irradiance per band label, W·m⁻²·µm⁻¹.
    pub esun_per_band: BTreeMap<String, f64>,
    pub sun_zenith_deg: f64,
    pub earth_sun_dist_au: f64,
}

impl SolarGeometry {
    /// Unit-gain geometry: esun = π, zenith 0, distance 1 AU, so the
    /// conversion factor is exactly 1 for every listed band.
    pub fn unit_gain(bands: &[Band]) -> SolarGeometry {
        SolarGeometry {
            esun_per_band: bands
                .iter()
                .map(|b| (b.label().to_string(), PI))
                .collect(),
            sun_zenith_deg: 0.0,
            earth_sun_dist_au: 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.sun_zenith_deg >= 0.0 && self.sun_zenith_deg < 90.0) {
            return Err(Error::InvalidConfig(format!(
                "sun zenith must be in [0, 90) degrees, got {}",
                self.sun_zenith_deg
            )));
        }
        if !(self.earth_sun_dist_au > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "earth-sun distance must be positive, got {}",
                self.earth_sun_dist_au
            )));
        }
        if let Some((band, esun)) = self.esun_per_band.iter().find(|(_, e)| !(**e > 0.0)) {
            return Err(Error::InvalidConfig(format!(
                "esun for band {band} must be positive, got {esun}"
            )));
        }
        Ok(())
    }
}

impl Default for SolarGeometry {
    fn default() -> Self {
        SolarGeometry {
            esun_per_band: BTreeMap::new(),
            sun_zenith_deg: 0.0,
            earth_sun_dist_au: 1.0,
        }
    }
}

fn default_source_gsd() -> f64 {
    10.0
}
fn default_target_gsd() -> f64 {
    4.75
}
fn default_reference_band() -> Band {
    Band::Green
}
fn default_misalign_sigma() -> f64 {
    4.75
}
fn default_tile_size() -> usize {
    4096
}

/// Full simulator configuration. Read from JSON by the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    #[serde(default = "default_source_gsd")]
    pub source_gsd: f64,
    #[serde(default = "default_target_gsd")]
    pub target_gsd: f64,
    #[serde(default = "default_reference_band")]
    pub reference_band: Band,
    /// Half-normal magnitude scale of the band shift, meters.
    #[serde(default = "default_misalign_sigma")]
    pub misalign_sigma: f64,
    #[serde(default)]
    pub psf: PsfSpec,
    #[serde(default)]
    pub solar: SolarGeometry,
    #[serde(default = "default_tile_size")]
    pub tile_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            source_gsd: default_source_gsd(),
            target_gsd: default_target_gsd(),
            reference_band: default_reference_band(),
            misalign_sigma: default_misalign_sigma(),
            psf: PsfSpec::default(),
            solar: SolarGeometry::default(),
            tile_size: default_tile_size(),
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.source_gsd > 0.0) || !(self.target_gsd > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "gsd values must be positive, got source {} target {}",
                self.source_gsd, self.target_gsd
            )));
        }
        if self.tile_size == 0 {
            return Err(Error::InvalidConfig("tile_size must be positive".into()));
        }
        if !(self.misalign_sigma >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "misalign_sigma must be nonnegative, got {}",
                self.misalign_sigma
            )));
        }
        self.solar.validate()
    }
}

/// Applied per-band shifts, meters, plus the band-to-band RMSE.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MisalignmentReport {
    pub reference_band: Band,
    pub shifts: Vec<BandShift>,
    pub rmse_m: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BandShift {
    pub band: Band,
    pub dx_m: f64,
    pub dy_m: f64,
}

// Keys cubic convolution kernel, a = -0.5.
fn cubic_kernel(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (A + 2.0) * x * x * x - (A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        A * x * x * x - 5.0 * A * x * x + 8.0 * A * x - 4.0 * A
    } else {
        0.0
    }
}

// Four taps around continuous source coordinate `s`, indices clamped to
// [0, n). Weights are renormalized so constants survive exactly.
fn cubic_taps(s: f64, n: usize) -> ([usize; 4], [f64; 4]) {
    let base = s.floor() as isize;
    let mut idx = [0usize; 4];
    let mut w = [0f64; 4];
    let mut sum = 0.0;
    for k in 0..4 {
        let i = base - 1 + k as isize;
        w[k] = cubic_kernel(s - i as f64);
        sum += w[k];
        idx[k] = i.clamp(0, n as isize - 1) as usize;
    }
    for k in 0..4 {
        w[k] /= sum;
    }
    (idx, w)
}

// Separable cubic-convolution sampling of one band on an arbitrary grid of
// source coordinates (one coordinate per output column/row).
fn resample_grid(src: &[f32], w: usize, h: usize, xs: &[f64], ys: &[f64]) -> Vec<f32> {
    let out_w = xs.len();
    let out_h = ys.len();
    let col_taps: Vec<([usize; 4], [f64; 4])> = xs.iter().map(|x| cubic_taps(*x, w)).collect();
    let row_taps: Vec<([usize; 4], [f64; 4])> = ys.iter().map(|y| cubic_taps(*y, h)).collect();

    // horizontal pass: h x out_w
    let mut horiz = vec![0f64; h * out_w];
    for r in 0..h {
        let row = &src[r * w..(r + 1) * w];
        let dst = &mut horiz[r * out_w..(r + 1) * out_w];
        for (c, (idx, wt)) in col_taps.iter().enumerate() {
            dst[c] = wt[0] * row[idx[0]] as f64
                + wt[1] * row[idx[1]] as f64
                + wt[2] * row[idx[2]] as f64
                + wt[3] * row[idx[3]] as f64;
        }
    }
    // vertical pass: out_h x out_w
    let mut out = vec![0f32; out_h * out_w];
    for (r, (idx, wt)) in row_taps.iter().enumerate() {
        let r0 = &horiz[idx[0] * out_w..idx[0] * out_w + out_w];
        let r1 = &horiz[idx[1] * out_w..idx[1] * out_w + out_w];
        let r2 = &horiz[idx[2] * out_w..idx[2] * out_w + out_w];
        let r3 = &horiz[idx[3] * out_w..idx[3] * out_w + out_w];
        let dst = &mut out[r * out_w..(r + 1) * out_w];
        for c in 0..out_w {
            dst[c] = (wt[0] * r0[c] + wt[1] * r1[c] + wt[2] * r2[c] + wt[3] * r3[c]) as f32;
        }
    }
    out
}

/// Bicubic resampling of a square-pixel raster to a new ground sampling
/// distance. Output dimensions are floor(dim * source_gsd / target_gsd);
/// the geotransform origin is preserved.
pub fn resample_bicubic(r: &Raster, target_gsd: f64) -> Result<Raster> {
    if !(target_gsd > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "target gsd must be positive, got {target_gsd}"
        )));
    }
    let px = r.geo.pixel_size_x;
    let py = r.geo.pixel_size_y;
    if (px - py).abs() > 1e-9 * px.max(py) {
        return Err(Error::InvalidRaster(format!(
            "resampling requires square pixels, got {px} x {py}"
        )));
    }
    let source_gsd = px;
    let scale = source_gsd / target_gsd;
    let out_w = ((r.width() as f64) * scale).floor() as usize;
    let out_h = ((r.height() as f64) * scale).floor() as usize;
    if out_w == 0 || out_h == 0 {
        return Err(Error::InvalidConfig(format!(
            "target gsd {target_gsd} collapses raster to {out_w}x{out_h}"
        )));
    }
    // output pixel centers mapped into source pixel coordinates
    let xs: Vec<f64> = (0..out_w)
        .map(|c| (c as f64 + 0.5) * target_gsd / source_gsd - 0.5)
        .collect();
    let ys: Vec<f64> = (0..out_h)
        .map(|r| (r as f64 + 0.5) * target_gsd / source_gsd - 0.5)
        .collect();

    let bands = r
        .bands()
        .iter()
        .enumerate()
        .map(|(i, b)| {
            (
                b.clone(),
                resample_grid(r.band_at(i), r.width(), r.height(), &xs, &ys),
            )
        })
        .collect();
    let mut out = Raster::from_bands(out_w, out_h, bands, r.geo.with_pixel_size(target_gsd))?;
    out.nodata = r.nodata;
    Ok(out)
}

/// Shift every non-reference band by an explicit (dx, dy) vector in meters
/// (x east, y north), realized with the same cubic kernel as resampling.
/// `shifts` is indexed like `r.bands()`; the reference band entry is ignored
/// and reported as (0,0).
pub fn misalign_with_shifts(
    r: &Raster,
    reference_band: &Band,
    shifts: &[(f64, f64)],
) -> Result<(Raster, MisalignmentReport)> {
    let ref_idx = r
        .band_index(reference_band)
        .ok_or_else(|| Error::MissingBand(reference_band.label().to_string()))?;
    if shifts.len() != r.bands().len() {
        return Err(Error::ShapeMismatch(format!(
            "{} shifts for {} bands",
            shifts.len(),
            r.bands().len()
        )));
    }
    let mut out_bands = Vec::with_capacity(r.bands().len());
    let mut records = Vec::with_capacity(r.bands().len());
    for (i, band) in r.bands().iter().enumerate() {
        let (dx, dy) = if i == ref_idx { (0.0, 0.0) } else { shifts[i] };
        records.push(BandShift {
            band: band.clone(),
            dx_m: dx,
            dy_m: dy,
        });
        let grid = if dx == 0.0 && dy == 0.0 {
            r.band_at(i).to_vec()
        } else {
            // feature moves east by dx and north by dy: sample the source at
            // (col - dx/px, row + dy/py)
            let sx = dx / r.geo.pixel_size_x;
            let sy = dy / r.geo.pixel_size_y;
            let xs: Vec<f64> = (0..r.width()).map(|c| c as f64 - sx).collect();
            let ys: Vec<f64> = (0..r.height()).map(|row| row as f64 + sy).collect();
            resample_grid(r.band_at(i), r.width(), r.height(), &xs, &ys)
        };
        out_bands.push((band.clone(), grid));
    }
    let non_ref: Vec<&BandShift> = records
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != ref_idx)
        .map(|(_, s)| s)
        .collect();
    let rmse_m = if non_ref.is_empty() {
        0.0
    } else {
        (non_ref
            .iter()
            .map(|s| s.dx_m * s.dx_m + s.dy_m * s.dy_m)
            .sum::<f64>()
            / non_ref.len() as f64)
            .sqrt()
    };
    let mut out = Raster::from_bands(r.width(), r.height(), out_bands, r.geo)?;
    out.nodata = r.nodata;
    Ok((
        out,
        MisalignmentReport {
            reference_band: reference_band.clone(),
            shifts: records,
            rmse_m,
        },
    ))
}

/// Draw one shift vector: magnitude |N(0, sigma)| meters, direction uniform.
fn draw_shift(rng: &mut ChaCha8Rng, sigma_m: f64) -> (f64, f64) {
    let magnitude = if sigma_m > 0.0 {
        Normal::new(0.0, sigma_m).expect("valid sigma").sample(rng).abs()
    } else {
        let _ = rng.random::<f64>();
        0.0
    };
    let theta = rng.random::<f64>() * 2.0 * PI;
    (magnitude * theta.cos(), magnitude * theta.sin())
}

/// Apply seeded random band-to-band misalignment (pushbroom attitude model).
pub fn misalign_bands(r: &Raster, cfg: &SimConfig) -> Result<(Raster, MisalignmentReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let shifts: Vec<(f64, f64)> = r
        .bands()
        .iter()
        .map(|b| {
            if b == &cfg.reference_band {
                (0.0, 0.0)
            } else {
                draw_shift(&mut rng, cfg.misalign_sigma)
            }
        })
        .collect();
    misalign_with_shifts(r, &cfg.reference_band, &shifts)
}

// Symmetric (half-sample) reflection of an out-of-range index.
fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Convolve every band with the normalized PSF kernel (true convolution,
/// kernel flipped), reflect-padded at the edges. Dimensions are unchanged.
pub fn apply_psf(r: &Raster, psf: &PsfSpec) -> Result<Raster> {
    let kernel = psf.realize()?;
    let side = kernel.side;
    let c = (side / 2) as isize;
    let w = r.width();
    let h = r.height();
    if side == 1 {
        return Ok(r.clone());
    }
    let bands = r
        .bands()
        .iter()
        .enumerate()
        .map(|(bi, band)| {
            let src = r.band_at(bi);
            let mut dst = vec![0f32; w * h];
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut acc = 0f64;
                    for ky in 0..side as isize {
                        let sy = reflect(y + c - ky, h);
                        for kx in 0..side as isize {
                            let sx = reflect(x + c - kx, w);
                            acc += kernel.weights[(ky * side as isize + kx) as usize]
                                * src[sy * w + sx] as f64;
                        }
                    }
                    dst[(y * w as isize + x) as usize] = acc as f32;
                }
            }
            (band.clone(), dst)
        })
        .collect();
    let mut out = Raster::from_bands(w, h, bands, r.geo)?;
    out.nodata = r.nodata;
    Ok(out)
}

/// Convert at-sensor radiance to top-of-atmosphere reflectance:
/// rho = pi * L * d^2 / (esun_band * cos(zenith)). Values are not clamped.
pub fn radiance_to_reflectance(r: &Raster, solar: &SolarGeometry) -> Result<Raster> {
    solar.validate()?;
    let cos_z = solar.sun_zenith_deg.to_radians().cos();
    let d2 = solar.earth_sun_dist_au * solar.earth_sun_dist_au;
    let factors: Vec<f64> = r
        .bands()
        .iter()
        .map(|b| {
            solar
                .esun_per_band
                .get(b.label())
                .map(|esun| PI * d2 / (esun * cos_z))
                .ok_or_else(|| {
                    Error::InvalidConfig(format!("no esun entry for band {}", b.label()))
                })
        })
        .collect::<Result<_>>()?;
    let bands = r
        .bands()
        .iter()
        .enumerate()
        .map(|(i, band)| {
            let f = factors[i];
            (
                band.clone(),
                r.band_at(i).iter().map(|l| (*l as f64 * f) as f32).collect(),
            )
        })
        .collect();
    let mut out = Raster::from_bands(r.width(), r.height(), bands, r.geo)?;
    out.nodata = r.nodata;
    Ok(out)
}

/// One tile of the final product grid.
#[derive(Debug, Clone)]
pub struct Tile {
    pub raster: Raster,
    pub grid_col: usize,
    pub grid_row: usize,
    /// Pixel offset of the tile's top-left corner in the source raster.
    pub offset_x: usize,
    pub offset_y: usize,
    /// Extent of real data; the rest of the tile is zero padding.
    pub valid_width: usize,
    pub valid_height: usize,
    pub padded: bool,
}

impl Tile {
    pub fn id(&self) -> String {
        format!("tile_c{:03}_r{:03}", self.grid_col, self.grid_row)
    }
}

/// Cut the raster into a non-overlapping grid of tile_size x tile_size tiles,
/// zero-padding partial edge tiles. Tiles are ordered row-major.
pub fn tile(r: &Raster, tile_size: usize) -> Result<Vec<Tile>> {
    if tile_size == 0 {
        return Err(Error::InvalidConfig("tile_size must be positive".into()));
    }
    let cols = r.width().div_ceil(tile_size);
    let rows = r.height().div_ceil(tile_size);
    let nb = r.bands().len();
    let mut tiles = Vec::with_capacity(cols * rows);
    for gr in 0..rows {
        for gc in 0..cols {
            let ox = gc * tile_size;
            let oy = gr * tile_size;
            let vw = tile_size.min(r.width() - ox);
            let vh = tile_size.min(r.height() - oy);
            let padded = vw < tile_size || vh < tile_size;
            let mut data = vec![0f32; tile_size * tile_size * nb];
            for b in 0..nb {
                let src = r.band_at(b);
                for row in 0..vh {
                    let s = (oy + row) * r.width() + ox;
                    let d = b * tile_size * tile_size + row * tile_size;
                    data[d..d + vw].copy_from_slice(&src[s..s + vw]);
                }
            }
            let raster = Raster::new(
                tile_size,
                tile_size,
                r.bands().to_vec(),
                data,
                r.geo.offset(ox, oy),
                r.nodata,
            )?;
            tiles.push(Tile {
                raster,
                grid_col: gc,
                grid_row: gr,
                offset_x: ox,
                offset_y: oy,
                valid_width: vw,
                valid_height: vh,
                padded,
            });
        }
    }
    Ok(tiles)
}

/// Full simulator chain: resample, misalign, PSF, reflectance, tile.
pub fn simulate(r: &Raster, cfg: &SimConfig) -> Result<(Vec<Tile>, MisalignmentReport)> {
    cfg.validate()?;
    let resampled = resample_bicubic(r, cfg.target_gsd)?;
    let (misaligned, report) = misalign_bands(&resampled, cfg)?;
    let blurred = apply_psf(&misaligned, &cfg.psf)?;
    let reflectance = radiance_to_reflectance(&blurred, &cfg.solar)?;
    let tiles = tile(&reflectance, cfg.tile_size)?;
    Ok((tiles, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::GeoTransform;

    fn geo(gsd: f64) -> GeoTransform {
        GeoTransform::new(0.0, 1000.0, gsd, gsd, 32643).unwrap()
    }

    fn single_band(w: usize, h: usize, gsd: f64, f: impl Fn(usize, usize) -> f32) -> Raster {
        let mut data = Vec::with_capacity(w * h);
        for r in 0..h {
            for c in 0..w {
                data.push(f(c, r));
            }
        }
        Raster::new(w, h, vec![Band::Green], data, geo(gsd), None).unwrap()
    }

    #[test]
    fn resample_preserves_constants_exactly() {
        let r = single_band(20, 20, 10.0, |_, _| 3.25);
        let out = resample_bicubic(&r, 4.75).unwrap();
        assert!(out.data().iter().all(|v| *v == 3.25));
    }

    #[test]
    fn resample_output_dims_follow_floor_rule() {
        let r = single_band(100, 100, 10.0, |_, _| 0.0);
        let out = resample_bicubic(&r, 4.75).unwrap();
        assert_eq!((out.width(), out.height()), (210, 210));
        assert_eq!(out.geo.pixel_size_x, 4.75);
        assert_eq!(out.geo.origin_x, 0.0);
        assert_eq!(out.geo.origin_y, 1000.0);
    }

    #[test]
    fn resample_reproduces_linear_ramp_in_interior() {
        // band value = source column index; cubic convolution reproduces
        // linear functions, so out(c) = (c + 0.5) * scale - 0.5 exactly
        let r = single_band(64, 8, 10.0, |c, _| c as f32);
        let out = resample_bicubic(&r, 4.0).unwrap();
        let scale = 4.0 / 10.0;
        for row in 2..out.height() - 2 {
            for col in 5..out.width() - 5 {
                let expect = (col as f64 + 0.5) * scale - 0.5;
                let got = out.get(0, col, row) as f64;
                assert!(
                    (got - expect).abs() < 1e-5,
                    "col {col}: got {got}, expect {expect}"
                );
            }
        }
    }

    #[test]
    fn resample_rejects_bad_gsd() {
        let r = single_band(4, 4, 10.0, |_, _| 0.0);
        assert!(resample_bicubic(&r, 0.0).is_err());
        assert!(resample_bicubic(&r, -1.0).is_err());
    }

    fn two_band(w: usize, h: usize, gsd: f64) -> Raster {
        let n = w * h;
        let green: Vec<f32> = (0..n).map(|i| i as f32).collect();
        let nir: Vec<f32> = (0..n).map(|i| (2 * i) as f32).collect();
        Raster::from_bands(w, h, vec![(Band::Green, green), (Band::Nir, nir)], geo(gsd)).unwrap()
    }

    #[test]
    fn misalign_sigma_zero_is_identity() {
        let r = two_band(16, 16, 4.75);
        let cfg = SimConfig {
            misalign_sigma: 0.0,
            ..SimConfig::default()
        };
        let (out, report) = misalign_bands(&r, &cfg).unwrap();
        assert_eq!(out.data(), r.data());
        assert_eq!(report.rmse_m, 0.0);
    }

    #[test]
    fn misalign_is_deterministic_per_seed() {
        let r = two_band(16, 16, 4.75);
        let cfg = SimConfig {
            seed: 7,
            ..SimConfig::default()
        };
        let (a, ra) = misalign_bands(&r, &cfg).unwrap();
        let (b, rb) = misalign_bands(&r, &cfg).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(ra.rmse_m, rb.rmse_m);
        let cfg2 = SimConfig { seed: 8, ..cfg };
        let (_, rc) = misalign_bands(&r, &cfg2).unwrap();
        assert_ne!(ra.rmse_m, rc.rmse_m);
    }

    #[test]
    fn misalign_missing_reference_band_errors() {
        let r = single_band(8, 8, 4.75, |_, _| 0.0);
        let cfg = SimConfig {
            reference_band: Band::Red,
            ..SimConfig::default()
        };
        assert!(matches!(
            misalign_bands(&r, &cfg),
            Err(Error::MissingBand(_))
        ));
    }

    #[test]
    fn forced_integer_shift_moves_impulse() {
        // impulse at (col 5, row 6) in the NIR band, GREEN as reference
        let w = 16;
        let h = 16;
        let mut nir = vec![0f32; w * h];
        nir[6 * w + 5] = 1.0;
        let r = Raster::from_bands(
            w,
            h,
            vec![(Band::Green, vec![0.0; w * h]), (Band::Nir, nir)],
            geo(4.75),
        )
        .unwrap();
        // shift east by exactly 2 pixels
        let shifts = vec![(0.0, 0.0), (2.0 * 4.75, 0.0)];
        let (out, report) = misalign_with_shifts(&r, &Band::Green, &shifts).unwrap();
        let nir_out = out.band(&Band::Nir).unwrap();
        assert!((nir_out[6 * w + 7] - 1.0).abs() < 1e-6);
        assert!(nir_out[6 * w + 5].abs() < 1e-6);
        assert!((report.rmse_m - 9.5).abs() < 1e-12);
        assert_eq!(report.shifts[0].dx_m, 0.0);
    }

    #[test]
    fn psf_identity_kernel_is_identity() {
        let r = single_band(8, 8, 4.75, |c, row| (c * row) as f32);
        let out = apply_psf(
            &r,
            &PsfSpec::Kernel {
                side: 1,
                weights: vec![1.0],
            },
        )
        .unwrap();
        assert_eq!(out.data(), r.data());
    }

    #[test]
    fn psf_preserves_constant_image() {
        let r = single_band(9, 7, 4.75, |_, _| 0.75);
        let out = apply_psf(&r, &PsfSpec::default()).unwrap();
        assert!(out.data().iter().all(|v| (*v - 0.75).abs() < 1e-6));
    }

    #[test]
    fn psf_matches_brute_force_box_kernel() {
        let r = single_band(4, 4, 4.75, |c, row| (row * 4 + c) as f32);
        let psf = PsfSpec::Kernel {
            side: 3,
            weights: vec![1.0; 9],
        };
        let out = apply_psf(&r, &psf).unwrap();
        // direct oracle: out(y,x) = mean over 3x3 neighborhood with
        // symmetric reflection
        let refl = |i: isize, n: usize| -> usize {
            if i < 0 {
                (-i - 1) as usize
            } else if i >= n as isize {
                2 * n - 1 - i as usize
            } else {
                i as usize
            }
        };
        for y in 0..4isize {
            for x in 0..4isize {
                let mut acc = 0.0f64;
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        acc += r.get(0, refl(x + dx, 4), refl(y + dy, 4)) as f64;
                    }
                }
                let expect = (acc / 9.0) as f32;
                let got = out.get(0, x as usize, y as usize);
                assert!(
                    (got - expect).abs() <= 1e-6 * expect.abs().max(1.0),
                    "({x},{y}): got {got}, expect {expect}"
                );
            }
        }
    }

    #[test]
    fn psf_rejects_even_and_zero_kernels() {
        assert!(PsfSpec::Kernel {
            side: 2,
            weights: vec![0.25; 4]
        }
        .realize()
        .is_err());
        assert!(PsfSpec::Kernel {
            side: 3,
            weights: vec![0.0; 9]
        }
        .realize()
        .is_err());
    }

    #[test]
    fn reflectance_inverts_to_one() {
        let solar = SolarGeometry {
            esun_per_band: [("GREEN".to_string(), 1500.0)].into(),
            sun_zenith_deg: 42.0,
            earth_sun_dist_au: 1.01,
        };
        let cos_z = 42f64.to_radians().cos();
        let l = (1500.0 * cos_z / (PI * 1.01 * 1.01)) as f32;
        let r = single_band(4, 4, 10.0, |_, _| l);
        let out = radiance_to_reflectance(&r, &solar).unwrap();
        assert!(out.data().iter().all(|v| (*v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn reflectance_hand_case() {
        // esun 1000, zenith 30 deg, d 1, L 100 -> pi*100/(1000*cos30) = 0.36276
        let solar = SolarGeometry {
            esun_per_band: [("GREEN".to_string(), 1000.0)].into(),
            sun_zenith_deg: 30.0,
            earth_sun_dist_au: 1.0,
        };
        let r = single_band(2, 2, 10.0, |_, _| 100.0);
        let out = radiance_to_reflectance(&r, &solar).unwrap();
        assert!((out.get(0, 0, 0) as f64 - 0.36276).abs() < 1e-5);
        // L = 0 -> rho = 0
        let z = single_band(2, 2, 10.0, |_, _| 0.0);
        let out = radiance_to_reflectance(&z, &solar).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn reflectance_rejects_bad_geometry() {
        let r = single_band(2, 2, 10.0, |_, _| 1.0);
        let mut solar = SolarGeometry {
            esun_per_band: [("GREEN".to_string(), 1000.0)].into(),
            sun_zenith_deg: 90.0,
            earth_sun_dist_au: 1.0,
        };
        assert!(radiance_to_reflectance(&r, &solar).is_err());
        solar.sun_zenith_deg = 30.0;
        solar.esun_per_band.clear();
        assert!(radiance_to_reflectance(&r, &solar).is_err());
    }

    #[test]
    fn tile_exact_grid_single_tile() {
        let r = single_band(4096, 4096, 4.75, |c, _| (c % 17) as f32);
        let tiles = tile(&r, 4096).unwrap();
        assert_eq!(tiles.len(), 1);
        assert!(!tiles[0].padded);
        assert_eq!(tiles[0].raster.data(), r.data());
    }

    #[test]
    fn tile_partial_grid_is_padded_with_recorded_extents() {
        let r = single_band(5000, 3000, 4.75, |c, row| (c + row) as f32);
        let tiles = tile(&r, 4096).unwrap();
        assert_eq!(tiles.len(), 2);
        assert!(tiles.iter().all(|t| t.padded));
        assert_eq!(
            (tiles[0].valid_width, tiles[0].valid_height),
            (4096, 3000)
        );
        assert_eq!((tiles[1].valid_width, tiles[1].valid_height), (904, 3000));
        assert_eq!(tiles[1].offset_x, 4096);
        // padding is zero
        assert_eq!(tiles[1].raster.get(0, 904, 0), 0.0);
    }

    #[test]
    fn tile_valid_extents_partition_the_source() {
        for (w, h, ts) in [(50, 30, 16), (64, 64, 64), (7, 9, 4), (100, 40, 33)] {
            let r = single_band(w, h, 4.75, |c, row| (row * w + c) as f32);
            let tiles = tile(&r, ts).unwrap();
            let mut seen = vec![0u32; w * h];
            for t in &tiles {
                for row in 0..t.valid_height {
                    for col in 0..t.valid_width {
                        let v = t.raster.get(0, col, row);
                        let sc = t.offset_x + col;
                        let sr = t.offset_y + row;
                        assert_eq!(v, r.get(0, sc, sr));
                        seen[sr * w + sc] += 1;
                    }
                }
            }
            assert!(seen.iter().all(|c| *c == 1), "{w}x{h} ts {ts}");
        }
    }

    #[test]
    fn tile_geotransform_follows_offset() {
        let r = single_band(10, 10, 2.0, |_, _| 0.0);
        let tiles = tile(&r, 4).unwrap();
        let t = &tiles[4]; // grid (1,1)
        assert_eq!((t.grid_col, t.grid_row), (1, 1));
        assert_eq!(t.raster.geo.origin_x, 8.0);
        assert_eq!(t.raster.geo.origin_y, 1000.0 - 8.0);
    }

    #[test]
    fn simulate_degenerate_config_equals_resample_plus_tile() {
        let r = two_band(40, 40, 10.0);
        let cfg = SimConfig {
            misalign_sigma: 0.0,
            psf: PsfSpec::Kernel {
                side: 1,
                weights: vec![1.0],
            },
            solar: SolarGeometry::unit_gain(r.bands()),
            tile_size: 64,
            ..SimConfig::default()
        };
        let (tiles, report) = simulate(&r, &cfg).unwrap();
        assert_eq!(report.rmse_m, 0.0);
        let expect = tile(&resample_bicubic(&r, cfg.target_gsd).unwrap(), 64).unwrap();
        assert_eq!(tiles.len(), expect.len());
        for (a, b) in tiles.iter().zip(&expect) {
            assert_eq!(a.raster.data(), b.raster.data());
        }
    }

    #[test]
    fn simulate_is_deterministic_and_places_tiles() {
        let r = two_band(100, 100, 10.0);
        let cfg = SimConfig {
            solar: SolarGeometry::unit_gain(r.bands()),
            tile_size: 32,
            seed: 99,
            ..SimConfig::default()
        };
        let (a, _) = simulate(&r, &cfg).unwrap();
        let (b, _) = simulate(&r, &cfg).unwrap();
        assert_eq!(a.len(), b.len());
        for (ta, tb) in a.iter().zip(&b) {
            assert_eq!(ta.raster.data(), tb.raster.data());
            assert_eq!(ta.raster.geo.pixel_size_x, 4.75);
        }
    }
}
