//! NDWI water indexing, threshold segmentation, chip extraction, synthetic
//! scene generation, and surface-water area accounting.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Band, GeoTransform, Mask, Raster};

/// Model input tile side, pixels.
pub const CHIP_SIZE: usize = 256;

/// Default NDWI water threshold (strict `>`).
pub const NDWI_THRESHOLD: f64 = 0.01;

/// Normalized difference water index, (GREEN - NIR) / (GREEN + NIR), per
/// pixel. A zero denominator maps to 0; results are clamped to [-1, 1].
pub fn ndwi(green: &[f32], nir: &[f32]) -> Result<Vec<f32>> {
    if green.len() != nir.len() {
        return Err(Error::ShapeMismatch(format!(
            "green has {} pixels, nir has {}",
            green.len(),
            nir.len()
        )));
    }
    Ok(green
        .iter()
        .zip(nir)
        .map(|(g, n)| {
            let g = *g as f64;
            let n = *n as f64;
            let denom = g + n;
            if denom == 0.0 {
                0.0
            } else {
                ((g - n) / denom).clamp(-1.0, 1.0) as f32
            }
        })
        .collect())
}

/// Binary mask from an NDWI grid: 1 where value > threshold (strict).
pub fn threshold_mask(
    ndwi_grid: &[f32],
    width: usize,
    height: usize,
    geo: GeoTransform,
    threshold: f64,
) -> Result<Mask> {
    if ndwi_grid.len() != width * height {
        return Err(Error::ShapeMismatch(format!(
            "ndwi grid has {} pixels for {}x{}",
            ndwi_grid.len(),
            width,
            height
        )));
    }
    let values = ndwi_grid
        .iter()
        .map(|v| if (*v as f64) > threshold { 1 } else { 0 })
        .collect();
    Mask::new(width, height, values, geo)
}

/// Surface-water area of a mask in hectares: ones * gsd^2 / 10000.
pub fn area_hectares(mask: &Mask, gsd: f64) -> Result<f64> {
    if !(gsd > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "gsd must be positive, got {gsd}"
        )));
    }
    Ok(mask.count_ones() as f64 * gsd * gsd / 10_000.0)
}

/// Where a chip came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChipSource {
    pub tile_id: String,
    pub col_off: usize,
    pub row_off: usize,
}

/// 256x256x4 model input tile, channel order [RED, GREEN, BLUE, NDWI],
/// band-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Chip {
    data: Vec<f32>,
    pub geo: GeoTransform,
    pub source: ChipSource,
}

pub const CHIP_BANDS: [Band; 4] = [Band::Red, Band::Green, Band::Blue, Band::Ndwi];

impl Chip {
    pub fn new(data: Vec<f32>, geo: GeoTransform, source: ChipSource) -> Result<Self> {
        if data.len() != CHIP_SIZE * CHIP_SIZE * 4 {
            return Err(Error::ShapeMismatch(format!(
                "chip payload has {} values, expected {}",
                data.len(),
                CHIP_SIZE * CHIP_SIZE * 4
            )));
        }
        let ndwi_ch = &data[3 * CHIP_SIZE * CHIP_SIZE..];
        if ndwi_ch.iter().any(|v| *v < -1.0 || *v > 1.0) {
            return Err(Error::InvalidRaster(
                "chip NDWI channel out of [-1, 1]".into(),
            ));
        }
        Ok(Chip { data, geo, source })
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// One channel of the chip (0 RED, 1 GREEN, 2 BLUE, 3 NDWI), row-major.
    pub fn channel(&self, i: usize) -> &[f32] {
        &self.data[i * CHIP_SIZE * CHIP_SIZE..(i + 1) * CHIP_SIZE * CHIP_SIZE]
    }

    pub fn to_raster(&self) -> Raster {
        Raster::new(
            CHIP_SIZE,
            CHIP_SIZE,
            CHIP_BANDS.to_vec(),
            self.data.clone(),
            self.geo,
            None,
        )
        .expect("chip invariants imply a valid raster")
    }

    pub fn from_raster(r: &Raster, source: ChipSource) -> Result<Chip> {
        if r.width() != CHIP_SIZE || r.height() != CHIP_SIZE {
            return Err(Error::ShapeMismatch(format!(
                "chip raster is {}x{}, expected {CHIP_SIZE}x{CHIP_SIZE}",
                r.width(),
                r.height()
            )));
        }
        if r.bands() != CHIP_BANDS {
            return Err(Error::InvalidRaster(format!(
                "chip raster bands {:?} != [RED, GREEN, BLUE, NDWI]",
                r.bands()
            )));
        }
        Chip::new(r.data().to_vec(), r.geo, source)
    }
}

/// Cut an aligned (tile, mask) pair into non-overlapping 256-pixel chips with
/// per-chip label masks. Partial edge windows are discarded. The NDWI channel
/// is computed from the tile's GREEN and NIR bands.
pub fn extract_chips(tile: &Raster, mask: &Mask, tile_id: &str) -> Result<Vec<(Chip, Mask)>> {
    for b in [Band::Red, Band::Green, Band::Blue, Band::Nir] {
        if tile.band_index(&b).is_none() {
            return Err(Error::MissingBand(b.label().to_string()));
        }
    }
    if mask.width() != tile.width() || mask.height() != tile.height() {
        return Err(Error::ShapeMismatch(format!(
            "mask {}x{} does not match tile {}x{}",
            mask.width(),
            mask.height(),
            tile.width(),
            tile.height()
        )));
    }
    let cols = tile.width() / CHIP_SIZE;
    let rows = tile.height() / CHIP_SIZE;
    let mut out = Vec::with_capacity(cols * rows);
    for gr in 0..rows {
        for gc in 0..cols {
            let col_off = gc * CHIP_SIZE;
            let row_off = gr * CHIP_SIZE;
            let window = tile.window(col_off, row_off, CHIP_SIZE, CHIP_SIZE)?;
            let ndwi_ch = ndwi(
                window.band(&Band::Green)?,
                window.band(&Band::Nir)?,
            )?;
            let mut data = Vec::with_capacity(CHIP_SIZE * CHIP_SIZE * 4);
            data.extend_from_slice(window.band(&Band::Red)?);
            data.extend_from_slice(window.band(&Band::Green)?);
            data.extend_from_slice(window.band(&Band::Blue)?);
            data.extend_from_slice(&ndwi_ch);
            let chip = Chip::new(
                data,
                window.geo,
                ChipSource {
                    tile_id: tile_id.to_string(),
                    col_off,
                    row_off,
                },
            )?;
            let label = mask.window(col_off, row_off, CHIP_SIZE, CHIP_SIZE)?;
            out.push((chip, label));
        }
    }
    Ok(out)
}

/// Per-band reflectance constants for scene synthesis.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BandLevels {
    pub red: f64,
    pub green: f64,
    pub blue: f64,
    pub nir: f64,
}

impl BandLevels {
    pub fn water_default() -> Self {
        BandLevels {
            red: 0.08,
            green: 0.30,
            blue: 0.20,
            nir: 0.05,
        }
    }

    pub fn land_default() -> Self {
        BandLevels {
            red: 0.25,
            green: 0.20,
            blue: 0.12,
            nir: 0.40,
        }
    }

    fn ndwi(&self) -> f64 {
        let denom = self.green + self.nir;
        if denom == 0.0 {
            0.0
        } else {
            (self.green - self.nir) / denom
        }
    }
}

fn default_scene_epsg() -> u32 {
    32643
}

/// Recipe for a synthetic four-band scene with planted water polygons.
///
/// Polygons are in pixel coordinates; ground truth is pixel-center
/// containment. Stands in for manual annotation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub gsd: f64,
    #[serde(default = "default_scene_epsg")]
    pub epsg: u32,
    /// World coordinate of the top-left corner; defaults to (0, height*gsd).
    #[serde(default)]
    pub origin: Option<(f64, f64)>,
    pub water_polygons: Vec<Vec<(f64, f64)>>,
    #[serde(default = "BandLevels::water_default")]
    pub water_levels: BandLevels,
    #[serde(default = "BandLevels::land_default")]
    pub land_levels: BandLevels,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidConfig("scene dimensions must be positive".into()));
        }
        if !(self.gsd > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "scene gsd must be positive, got {}",
                self.gsd
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig("noise_sigma must be nonnegative".into()));
        }
        for (i, poly) in self.water_polygons.iter().enumerate() {
            if poly.len() < 3 {
                return Err(Error::InvalidConfig(format!(
                    "water polygon {i} has {} vertices, need at least 3",
                    poly.len()
                )));
            }
            if poly.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "water polygon {i} has non-finite vertices"
                )));
            }
        }
        if !(self.water_levels.ndwi() > NDWI_THRESHOLD) {
            return Err(Error::InvalidConfig(format!(
                "water levels give NDWI {:.4}, not above the {NDWI_THRESHOLD} threshold",
                self.water_levels.ndwi()
            )));
        }
        if !(self.land_levels.ndwi() < NDWI_THRESHOLD) {
            return Err(Error::InvalidConfig(format!(
                "land levels give NDWI {:.4}, not below the {NDWI_THRESHOLD} threshold",
                self.land_levels.ndwi()
            )));
        }
        Ok(())
    }

    pub fn geo(&self) -> Result<GeoTransform> {
        let (ox, oy) = self
            .origin
            .unwrap_or((0.0, self.height as f64 * self.gsd));
        GeoTransform::new(ox, oy, self.gsd, self.gsd, self.epsg)
    }
}

// Even-odd ray-casting containment test for a point against one polygon.
fn point_in_polygon(px: f64, py: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > py) != (yj > py) {
            let x_cross = xi + (py - yi) / (yj - yi) * (xj - xi);
            if px < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Rasterize the spec's water polygons by pixel-center containment.
pub fn rasterize_polygons(spec: &SceneSpec) -> Result<Mask> {
    spec.validate()?;
    let geo = spec.geo()?;
    let mut values = vec![0u8; spec.width * spec.height];
    for row in 0..spec.height {
        let py = row as f64 + 0.5;
        for col in 0..spec.width {
            let px = col as f64 + 0.5;
            if spec
                .water_polygons
                .iter()
                .any(|poly| point_in_polygon(px, py, poly))
            {
                values[row * spec.width + col] = 1;
            }
        }
    }
    Mask::new(spec.width, spec.height, values, geo)
}

/// Generate a synthetic RED/GREEN/BLUE/NIR scene and its ground-truth mask.
/// Deterministic per seed.
pub fn generate_scene(spec: &SceneSpec) -> Result<(Raster, Mask)> {
    let truth = rasterize_polygons(spec)?;
    let geo = spec.geo()?;
    let n = spec.width * spec.height;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = if spec.noise_sigma > 0.0 {
        Some(Normal::new(0.0, spec.noise_sigma).expect("valid sigma"))
    } else {
        None
    };
    let levels = |b: usize, water: bool| -> f64 {
        let l = if water {
            &spec.water_levels
        } else {
            &spec.land_levels
        };
        match b {
            0 => l.red,
            1 => l.green,
            2 => l.blue,
            _ => l.nir,
        }
    };
    let mut bands = Vec::with_capacity(4);
    for (bi, band) in [Band::Red, Band::Green, Band::Blue, Band::Nir]
        .into_iter()
        .enumerate()
    {
        let mut grid = Vec::with_capacity(n);
        for i in 0..n {
            let base = levels(bi, truth.values()[i] == 1);
            let v = match &noise {
                Some(d) => base + d.sample(&mut rng),
                None => base,
            };
            grid.push(v as f32);
        }
        bands.push((band, grid));
    }
    let raster = Raster::from_bands(spec.width, spec.height, bands, geo)?;
    Ok((raster, truth))
}

/// One chip/label pair in a manifest. Paths are relative to the manifest file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChipEntry {
    pub chip: PathBuf,
    pub label: PathBuf,
    pub tile_id: String,
    pub col_off: usize,
    pub row_off: usize,
}

/// Index of all chips cut from a product, written next to the chip bundles.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ChipManifest {
    pub chips: Vec<ChipEntry>,
}

impl ChipManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<ChipManifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}
