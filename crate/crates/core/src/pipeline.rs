//! End-to-end pipeline: synthesize a scene, simulate the sensor product,
//! cut chips, infer a water mask (trained model or NDWI-threshold baseline),
//! and intersect with a road network. Every stage reads and writes files so
//! stages can also run independently via the CLI.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modelopt::container::{load_model, ModelFile};
use crate::raster::{load_raster, save_mask, save_raster, GeoTransform, Mask, Raster};
use crate::roads::{intersect, load_roads, write_flooded_geojson, IntersectOptions};
use crate::segnet::{forward, ModelConfig, ModelParams};
use crate::sim::{simulate, MisalignmentReport, SimConfig, SolarGeometry};
use crate::water::{
    area_hectares, extract_chips, generate_scene, ndwi, threshold_mask, Chip, ChipEntry,
    ChipManifest, SceneSpec, CHIP_SIZE, NDWI_THRESHOLD,
};

/// One tile's placement in the product grid, stored in `tiles.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TileRecord {
    pub id: String,
    /// Bundle stem relative to the index file.
    pub path: PathBuf,
    pub grid_col: usize,
    pub grid_row: usize,
    pub offset_x: usize,
    pub offset_y: usize,
    pub valid_width: usize,
    pub valid_height: usize,
    pub padded: bool,
}

/// Index of a tiled product: grid placement plus the full-product geometry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TileSetIndex {
    pub tile_size: usize,
    pub product_width: usize,
    pub product_height: usize,
    pub geo: GeoTransform,
    pub tiles: Vec<TileRecord>,
}

impl TileSetIndex {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<TileSetIndex> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn tile(&self, id: &str) -> Option<&TileRecord> {
        self.tiles.iter().find(|t| t.id == id)
    }
}

/// Generate a synthetic scene; writes `<out>/scene` and `<out>/truth`.
pub fn stage_synth(spec: &SceneSpec, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let (scene, truth) = generate_scene(spec)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let scene_stem = out_dir.join("scene");
    let truth_stem = out_dir.join("truth");
    save_raster(&scene, &scene_stem)?;
    save_mask(&truth, &truth_stem)?;
    Ok((scene_stem, truth_stem))
}

/// Run the sensor simulator on a raster bundle; writes tile bundles,
/// `tiles.json`, and `misalignment.json`.
pub fn stage_simulate(
    input_stem: &Path,
    cfg: &SimConfig,
    out_dir: &Path,
) -> Result<(PathBuf, MisalignmentReport)> {
    let input = load_raster(input_stem)?;
    // an empty esun table means unit gain over the input's bands
    let mut cfg = cfg.clone();
    if cfg.solar.esun_per_band.is_empty() {
        cfg.solar = SolarGeometry {
            esun_per_band: SolarGeometry::unit_gain(input.bands()).esun_per_band,
            ..cfg.solar
        };
    }
    let (tiles, report) = simulate(&input, &cfg)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut records = Vec::with_capacity(tiles.len());
    let first = &tiles[0];
    let product_width = tiles
        .iter()
        .map(|t| t.offset_x + t.valid_width)
        .max()
        .unwrap_or(0);
    let product_height = tiles
        .iter()
        .map(|t| t.offset_y + t.valid_height)
        .max()
        .unwrap_or(0);
    let product_geo = GeoTransform {
        epsg: first.raster.geo.epsg,
        ..first.raster.geo
    };
    for tile in &tiles {
        let stem = out_dir.join(tile.id());
        save_raster(&tile.raster, &stem)?;
        records.push(TileRecord {
            id: tile.id(),
            path: PathBuf::from(tile.id()),
            grid_col: tile.grid_col,
            grid_row: tile.grid_row,
            offset_x: tile.offset_x,
            offset_y: tile.offset_y,
            valid_width: tile.valid_width,
            valid_height: tile.valid_height,
            padded: tile.padded,
        });
    }
    let index = TileSetIndex {
        tile_size: cfg.tile_size,
        product_width,
        product_height,
        geo: product_geo,
        tiles: records,
    };
    let index_path = out_dir.join("tiles.json");
    index.save(&index_path)?;
    let report_path = out_dir.join("misalignment.json");
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::json(&report_path, e))?;
    fs::write(&report_path, text).map_err(|e| Error::io(&report_path, e))?;
    Ok((index_path, report))
}

/// Label source for the chip stage.
pub enum ChipLabels<'a> {
    /// Threshold the tile's own NDWI (the initial-annotation path).
    NdwiThreshold(f64),
    /// An aligned ground-truth mask covering the full product grid.
    Mask(&'a Mask),
}

fn chip_one_raster(
    raster: &Raster,
    tile_id: &str,
    abs_off: (usize, usize),
    labels: &ChipLabels<'_>,
    out_dir: &Path,
    manifest: &mut ChipManifest,
) -> Result<()> {
    let label_mask = match labels {
        ChipLabels::NdwiThreshold(thr) => {
            let grid = ndwi(
                raster.band(&crate::raster::Band::Green)?,
                raster.band(&crate::raster::Band::Nir)?,
            )?;
            threshold_mask(&grid, raster.width(), raster.height(), raster.geo, *thr)?
        }
        ChipLabels::Mask(full) => full.window(abs_off.0, abs_off.1, raster.width(), raster.height())?,
    };
    for (chip, label) in extract_chips(raster, &label_mask, tile_id)? {
        let name = format!(
            "chip_{}_{:04}_{:04}",
            tile_id, chip.source.col_off, chip.source.row_off
        );
        let chip_stem = out_dir.join(&name);
        let label_stem = out_dir.join(format!("{name}_label"));
        save_raster(&chip.to_raster(), &chip_stem)?;
        save_mask(&label, &label_stem)?;
        manifest.chips.push(ChipEntry {
            chip: PathBuf::from(&name),
            label: PathBuf::from(format!("{name}_label")),
            tile_id: tile_id.to_string(),
            col_off: abs_off.0 + chip.source.col_off,
            row_off: abs_off.1 + chip.source.row_off,
        });
    }
    Ok(())
}

/// Cut chips from every tile of a tiled product (cropping away padding).
/// Writes chip/label bundles and `manifest.json`.
pub fn stage_chip_tiles(
    index_path: &Path,
    labels: ChipLabels<'_>,
    out_dir: &Path,
) -> Result<PathBuf> {
    let index = TileSetIndex::load(index_path)?;
    let base = index_path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut manifest = ChipManifest::default();
    for rec in &index.tiles {
        let raster = load_raster(&base.join(&rec.path))?;
        let valid = raster.window(0, 0, rec.valid_width, rec.valid_height)?;
        chip_one_raster(
            &valid,
            &rec.id,
            (rec.offset_x, rec.offset_y),
            &labels,
            out_dir,
            &mut manifest,
        )?;
    }
    let manifest_path = out_dir.join("manifest.json");
    manifest.save(&manifest_path)?;
    Ok(manifest_path)
}

/// Cut chips from a single raster bundle (no tiling step).
pub fn stage_chip_raster(
    input_stem: &Path,
    labels: ChipLabels<'_>,
    out_dir: &Path,
) -> Result<PathBuf> {
    let raster = load_raster(input_stem)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut manifest = ChipManifest::default();
    chip_one_raster(&raster, "scene", (0, 0), &labels, out_dir, &mut manifest)?;
    let manifest_path = out_dir.join("manifest.json");
    manifest.save(&manifest_path)?;
    Ok(manifest_path)
}

/// Water-mask source for inference.
pub enum InferModel {
    /// NDWI-threshold baseline on the chip's NDWI channel.
    Baseline { threshold: f64 },
    /// Trained model file; probabilities thresholded at `threshold`.
    File { path: PathBuf, threshold: f64 },
}

fn load_chips(manifest_path: &Path) -> Result<Vec<(Chip, PathBuf)>> {
    let manifest = ChipManifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut chips = Vec::with_capacity(manifest.chips.len());
    for entry in &manifest.chips {
        let raster = load_raster(&base.join(&entry.chip))?;
        let chip = Chip::from_raster(
            &raster,
            crate::water::ChipSource {
                tile_id: entry.tile_id.clone(),
                col_off: entry.col_off,
                row_off: entry.row_off,
            },
        )?;
        chips.push((chip, entry.chip.clone()));
    }
    Ok(chips)
}

fn model_chip_masks(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    chips: &[(Chip, PathBuf)],
    threshold: f64,
) -> Result<Vec<Vec<u8>>> {
    let mut out = Vec::with_capacity(chips.len());
    for batch in chips.chunks(8) {
        let mut samples = Vec::with_capacity(batch.len());
        for (chip, _) in batch {
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
        let x: Array4<f32> = ndarray::stack(Axis(0), &views)
            .map_err(|e| Error::ShapeMismatch(format!("batch stack: {e}")))?;
        let probs = forward(params, cfg, &x)?;
        for (i, _) in batch.iter().enumerate() {
            let mut values = Vec::with_capacity(CHIP_SIZE * CHIP_SIZE);
            for r in 0..CHIP_SIZE {
                for col in 0..CHIP_SIZE {
                    values.push(if probs[(i, r, col, 0)] as f64 >= threshold {
                        1
                    } else {
                        0
                    });
                }
            }
            out.push(values);
        }
    }
    Ok(out)
}

/// Per-chip inference plus reassembly of the full-product water mask.
/// Regions not covered by any chip stay dry.
pub fn stage_infer(
    manifest_path: &Path,
    model: &InferModel,
    canvas: (usize, usize, GeoTransform),
    out_mask_stem: &Path,
) -> Result<Mask> {
    let chips = load_chips(manifest_path)?;
    let chip_masks: Vec<Vec<u8>> = match model {
        InferModel::Baseline { threshold } => chips
            .iter()
            .map(|(chip, _)| {
                chip.channel(3)
                    .iter()
                    .map(|v| if (*v as f64) > *threshold { 1u8 } else { 0u8 })
                    .collect()
            })
            .collect(),
        InferModel::File { path, threshold } => {
            let file: ModelFile = load_model(path)?;
            let params = file.dense_params()?;
            model_chip_masks(&params, &file.config, &chips, *threshold)?
        }
    };
    let (width, height, geo) = canvas;
    let mut full = Mask::zeros(width, height, geo)?;
    for ((chip, _), values) in chips.iter().zip(&chip_masks) {
        let (c0, r0) = (chip.source.col_off, chip.source.row_off);
        if c0 + CHIP_SIZE > width || r0 + CHIP_SIZE > height {
            return Err(Error::ShapeMismatch(format!(
                "chip at ({c0}, {r0}) exceeds canvas {width}x{height}"
            )));
        }
        for r in 0..CHIP_SIZE {
            for c in 0..CHIP_SIZE {
                if values[r * CHIP_SIZE + c] == 1 {
                    full.set(c0 + c, r0 + r, 1);
                }
            }
        }
    }
    save_mask(&full, out_mask_stem)?;
    Ok(full)
}

fn default_infer_threshold() -> f64 {
    0.5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChipStageConfig {
    #[serde(default = "default_ndwi_threshold")]
    pub ndwi_threshold: f64,
}

fn default_ndwi_threshold() -> f64 {
    NDWI_THRESHOLD
}

impl Default for ChipStageConfig {
    fn default() -> Self {
        ChipStageConfig {
            ndwi_threshold: NDWI_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct InferStageConfig {
    /// Model file; when absent the NDWI-threshold baseline is used.
    #[serde(default)]
    pub model: Option<PathBuf>,
    #[serde(default = "default_infer_threshold")]
    pub threshold: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntersectStageConfig {
    #[serde(default)]
    pub sample_spacing_m: Option<f64>,
    #[serde(default)]
    pub min_run_m: Option<f64>,
    #[serde(default = "default_timestamp")]
    pub timestamp: String,
    #[serde(default)]
    pub meters_per_unit: Option<f64>,
}

fn default_timestamp() -> String {
    "1970-01-01T00:00:00Z".to_string()
}

impl Default for IntersectStageConfig {
    fn default() -> Self {
        IntersectStageConfig {
            sample_spacing_m: None,
            min_run_m: None,
            timestamp: default_timestamp(),
            meters_per_unit: None,
        }
    }
}

/// Full pipeline configuration, read from one JSON file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub out_dir: PathBuf,
    /// Overrides both the scene seed and the simulator seed when set.
    #[serde(default)]
    pub seed: Option<u64>,
    pub scene: SceneSpec,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub chip: ChipStageConfig,
    #[serde(default)]
    pub infer: InferStageConfig,
    #[serde(default)]
    pub roads: Option<PathBuf>,
    #[serde(default)]
    pub intersect: IntersectStageConfig,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<PipelineConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

/// What the pipeline produced; serialized as `summary.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub scene: PathBuf,
    pub truth_mask: PathBuf,
    pub tiles_index: PathBuf,
    pub chip_manifest: PathBuf,
    pub chip_count: usize,
    pub water_mask: PathBuf,
    pub water_area_ha: f64,
    pub flooded_geojson: Option<PathBuf>,
    pub flooded_segments: usize,
}

/// Run synth -> simulate -> chip -> infer -> intersect, leaving all
/// intermediate products under `out_dir`.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineSummary> {
    let mut scene_spec = cfg.scene.clone();
    let mut sim_cfg = cfg.sim.clone();
    if let Some(seed) = cfg.seed {
        scene_spec.seed = seed;
        sim_cfg.seed = seed;
    }
    let out = &cfg.out_dir;

    let (scene_stem, truth_stem) = stage_synth(&scene_spec, &out.join("scene"))
        .map_err(|e| e.in_stage("synth"))?;
    let (tiles_index, _) = stage_simulate(&scene_stem, &sim_cfg, &out.join("sim"))
        .map_err(|e| e.in_stage("simulate"))?;
    let manifest = stage_chip_tiles(
        &tiles_index,
        ChipLabels::NdwiThreshold(cfg.chip.ndwi_threshold),
        &out.join("chips"),
    )
    .map_err(|e| e.in_stage("chip"))?;

    let index = TileSetIndex::load(&tiles_index)?;
    let model = match &cfg.infer.model {
        Some(path) => InferModel::File {
            path: path.clone(),
            threshold: cfg.infer.threshold,
        },
        None => InferModel::Baseline {
            threshold: cfg.chip.ndwi_threshold,
        },
    };
    let mask_stem = out.join("infer").join("water_mask");
    fs::create_dir_all(out.join("infer")).map_err(|e| Error::io(out.join("infer"), e))?;
    let mask = stage_infer(
        &manifest,
        &model,
        (index.product_width, index.product_height, index.geo),
        &mask_stem,
    )
    .map_err(|e| e.in_stage("infer"))?;
    let water_area_ha = area_hectares(&mask, index.geo.pixel_size_x)?;

    let manifest_loaded = ChipManifest::load(&manifest)?;
    let (flooded_geojson, flooded_segments) = match &cfg.roads {
        Some(roads_path) => {
            let roads = load_roads(roads_path).map_err(|e| e.in_stage("intersect"))?;
            let opts = IntersectOptions {
                sample_spacing_m: cfg.intersect.sample_spacing_m,
                min_run_m: cfg.intersect.min_run_m,
                timestamp: cfg.intersect.timestamp.clone(),
                meters_per_unit: cfg.intersect.meters_per_unit,
            };
            let segments = intersect(&mask, &roads, &opts).map_err(|e| e.in_stage("intersect"))?;
            let geojson_path = out.join("flooded.geojson");
            write_flooded_geojson(&segments, mask.geo.epsg, &geojson_path)
                .map_err(|e| e.in_stage("intersect"))?;
            (Some(geojson_path), segments.len())
        }
        None => (None, 0),
    };

    let summary = PipelineSummary {
        scene: scene_stem,
        truth_mask: truth_stem,
        tiles_index,
        chip_manifest: manifest,
        chip_count: manifest_loaded.chips.len(),
        water_mask: mask_stem,
        water_area_ha,
        flooded_geojson,
        flooded_segments,
    };
    let summary_path = out.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::json(&summary_path, e))?;
    fs::write(&summary_path, text).map_err(|e| Error::io(&summary_path, e))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::load_mask;
    use crate::water::BandLevels;

    fn pipeline_config(out_dir: PathBuf) -> PipelineConfig {
        PipelineConfig {
            out_dir,
            seed: Some(11),
            scene: SceneSpec {
                width: 320,
                height: 320,
                gsd: 10.0,
                epsg: 32643,
                origin: None,
                water_polygons: vec![
                    vec![(40.0, 40.0), (180.0, 40.0), (180.0, 150.0), (40.0, 150.0)],
                    vec![(200.0, 200.0), (290.0, 210.0), (240.0, 290.0)],
                ],
                water_levels: BandLevels::water_default(),
                land_levels: BandLevels::land_default(),
                noise_sigma: 0.01,
                seed: 0,
            },
            sim: SimConfig {
                tile_size: 512,
                ..SimConfig::default()
            },
            chip: ChipStageConfig::default(),
            infer: InferStageConfig::default(),
            roads: None,
            intersect: IntersectStageConfig::default(),
        }
    }

    #[test]
    fn pipeline_baseline_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let summary = run_pipeline(&pipeline_config(dir.path().to_path_buf())).unwrap();
        // 320 px at 10 m resample to 4.75 m -> 673 px, tiled at 512 -> 2x2
        let index = TileSetIndex::load(&summary.tiles_index).unwrap();
        assert_eq!(index.product_width, 673);
        assert_eq!(index.tiles.len(), 4);
        assert!(summary.chip_count > 0);
        assert!(summary.water_area_ha > 0.0);
        let mask = load_mask(&summary.water_mask).unwrap();
        assert_eq!(mask.width(), 673);
        assert!(mask.count_ones() > 0);
    }

    #[test]
    fn pipeline_is_deterministic() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        run_pipeline(&pipeline_config(dir_a.path().to_path_buf())).unwrap();
        run_pipeline(&pipeline_config(dir_b.path().to_path_buf())).unwrap();
        for rel in ["infer/water_mask.bin", "scene/scene.bin", "sim/tile_c000_r000.bin"] {
            let a = fs::read(dir_a.path().join(rel)).unwrap();
            let b = fs::read(dir_b.path().join(rel)).unwrap();
            assert_eq!(a, b, "{rel} differs between runs");
        }
    }
}
