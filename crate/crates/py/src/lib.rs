//! Python bindings for the road-flood detection pipeline: raster bundles,
//! NDWI segmentation, scene synthesis, the sensor simulator, road
//! intersection, training, and the latency/size reports.

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use floodsight_core::error::Error as CoreError;
use floodsight_core::modelopt::container as container;
use floodsight_core::raster as raster;
use floodsight_core::roads as roads;
use floodsight_core::segnet;
use floodsight_core::sim;
use floodsight_core::water;

fn err(e: CoreError) -> PyErr {
    match &e {
        CoreError::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(format!("invalid json: {e}"))
}

/// North-up affine georeferencing; origin is the top-left corner of pixel
/// (0,0).
#[pyclass(module = "floodsight", skip_from_py_object)]
#[derive(Clone)]
struct GeoTransform {
    inner: raster::GeoTransform,
}

#[pymethods]
impl GeoTransform {
    #[new]
    fn new(origin_x: f64, origin_y: f64, pixel_size_x: f64, pixel_size_y: f64, epsg: u32) -> PyResult<Self> {
        Ok(GeoTransform {
            inner: raster::GeoTransform::new(origin_x, origin_y, pixel_size_x, pixel_size_y, epsg)
                .map_err(err)?,
        })
    }

    #[getter]
    fn origin_x(&self) -> f64 {
        self.inner.origin_x
    }

    #[getter]
    fn origin_y(&self) -> f64 {
        self.inner.origin_y
    }

    #[getter]
    fn pixel_size_x(&self) -> f64 {
        self.inner.pixel_size_x
    }

    #[getter]
    fn pixel_size_y(&self) -> f64 {
        self.inner.pixel_size_y
    }

    #[getter]
    fn epsg(&self) -> u32 {
        self.inner.epsg
    }

    fn pixel_to_world(&self, col: f64, row: f64) -> (f64, f64) {
        self.inner.pixel_to_world(col, row)
    }

    fn world_to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        self.inner.world_to_pixel(x, y)
    }

    fn __repr__(&self) -> String {
        format!(
            "GeoTransform(origin=({}, {}), pixel=({}, {}), epsg={})",
            self.inner.origin_x,
            self.inner.origin_y,
            self.inner.pixel_size_x,
            self.inner.pixel_size_y,
            self.inner.epsg
        )
    }
}

/// Multi-band float32 raster (band-sequential, row-major within band).
#[pyclass(module = "floodsight", skip_from_py_object)]
#[derive(Clone)]
struct Raster {
    inner: raster::Raster,
}

#[pymethods]
impl Raster {
    /// Build from per-band grids: bands is a list of labels, data is the
    /// concatenated band-major payload.
    #[staticmethod]
    fn from_data(
        width: usize,
        height: usize,
        bands: Vec<String>,
        data: Vec<f32>,
        geo: &GeoTransform,
    ) -> PyResult<Self> {
        let bands = bands.iter().map(|s| raster::Band::from_label(s)).collect();
        Ok(Raster {
            inner: raster::Raster::new(width, height, bands, data, geo.inner, None).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(stem: PathBuf) -> PyResult<Self> {
        Ok(Raster {
            inner: raster::load_raster(&stem).map_err(err)?,
        })
    }

    fn save(&self, stem: PathBuf) -> PyResult<()> {
        raster::save_raster(&self.inner, &stem).map_err(err)
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn bands(&self) -> Vec<String> {
        self.inner.bands().iter().map(|b| b.label().to_string()).collect()
    }

    #[getter]
    fn geo(&self) -> GeoTransform {
        GeoTransform {
            inner: self.inner.geo,
        }
    }

    /// One band's grid, row-major.
    fn band(&self, label: &str) -> PyResult<Vec<f32>> {
        Ok(self
            .inner
            .band(&raster::Band::from_label(label))
            .map_err(err)?
            .to_vec())
    }

    fn __repr__(&self) -> String {
        format!(
            "Raster({}x{}, bands={:?})",
            self.inner.width(),
            self.inner.height(),
            self.bands()
        )
    }
}

/// Binary water mask on a raster grid.
#[pyclass(module = "floodsight", skip_from_py_object)]
#[derive(Clone)]
struct Mask {
    inner: raster::Mask,
}

#[pymethods]
impl Mask {
    #[staticmethod]
    fn from_values(width: usize, height: usize, values: Vec<u8>, geo: &GeoTransform) -> PyResult<Self> {
        Ok(Mask {
            inner: raster::Mask::new(width, height, values, geo.inner).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(stem: PathBuf) -> PyResult<Self> {
        Ok(Mask {
            inner: raster::load_mask(&stem).map_err(err)?,
        })
    }

    fn save(&self, stem: PathBuf) -> PyResult<()> {
        raster::save_mask(&self.inner, &stem).map_err(err)
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn geo(&self) -> GeoTransform {
        GeoTransform {
            inner: self.inner.geo,
        }
    }

    fn values(&self) -> Vec<u8> {
        self.inner.values().to_vec()
    }

    fn count_ones(&self) -> usize {
        self.inner.count_ones()
    }

    /// Surface-water area in hectares at the given ground sampling distance.
    fn area_hectares(&self, gsd: f64) -> PyResult<f64> {
        water::area_hectares(&self.inner, gsd).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Mask({}x{}, wet={})",
            self.inner.width(),
            self.inner.height(),
            self.inner.count_ones()
        )
    }
}

/// One simulated product tile with its grid placement.
#[pyclass(module = "floodsight")]
struct SimTile {
    raster: Py<Raster>,
    #[pyo3(get)]
    tile_id: String,
    #[pyo3(get)]
    offset_x: usize,
    #[pyo3(get)]
    offset_y: usize,
    #[pyo3(get)]
    valid_width: usize,
    #[pyo3(get)]
    valid_height: usize,
    #[pyo3(get)]
    padded: bool,
}

#[pymethods]
impl SimTile {
    #[getter]
    fn raster(&self, py: Python<'_>) -> Py<Raster> {
        self.raster.clone_ref(py)
    }

    fn __repr__(&self) -> String {
        format!(
            "SimTile({}, offset=({}, {}), valid={}x{}, padded={})",
            self.tile_id, self.offset_x, self.offset_y, self.valid_width, self.valid_height,
            self.padded
        )
    }
}

/// Maximal wet stretch of one road polyline.
#[pyclass(module = "floodsight", from_py_object)]
#[derive(Clone)]
struct FloodedSegment {
    inner: roads::FloodedSegment,
}

#[pymethods]
impl FloodedSegment {
    #[getter]
    fn road_id(&self) -> String {
        self.inner.road_id.clone()
    }

    #[getter]
    fn length_m(&self) -> f64 {
        self.inner.length_m
    }

    #[getter]
    fn sample_count(&self) -> usize {
        self.inner.sample_count
    }

    #[getter]
    fn start(&self) -> (f64, f64) {
        self.inner.start
    }

    #[getter]
    fn end(&self) -> (f64, f64) {
        self.inner.end
    }

    #[getter]
    fn timestamp(&self) -> String {
        self.inner.timestamp.clone()
    }

    fn samples(&self) -> Vec<(f64, f64)> {
        self.inner.samples.clone()
    }

    fn __repr__(&self) -> String {
        format!(
            "FloodedSegment(road_id={:?}, length_m={:.2}, samples={})",
            self.inner.road_id, self.inner.length_m, self.inner.sample_count
        )
    }
}

/// NDWI grid from green and NIR grids: (g - n) / (g + n), clamped to
/// [-1, 1]; zero denominators map to 0.
#[pyfunction]
fn ndwi(green: Vec<f32>, nir: Vec<f32>) -> PyResult<Vec<f32>> {
    water::ndwi(&green, &nir).map_err(err)
}

/// Threshold an NDWI grid into a water mask (strict >).
#[pyfunction]
#[pyo3(signature = (ndwi_grid, width, height, geo, threshold = 0.01))]
fn threshold_mask(
    ndwi_grid: Vec<f32>,
    width: usize,
    height: usize,
    geo: &GeoTransform,
    threshold: f64,
) -> PyResult<Mask> {
    Ok(Mask {
        inner: water::threshold_mask(&ndwi_grid, width, height, geo.inner, threshold)
            .map_err(err)?,
    })
}

/// NDWI-threshold water mask straight from a raster with GREEN and NIR
/// bands.
#[pyfunction]
#[pyo3(signature = (raster, threshold = 0.01))]
fn water_mask(raster: &Raster, threshold: f64) -> PyResult<Mask> {
    let green = raster.inner.band(&raster::Band::Green).map_err(err)?;
    let nir = raster.inner.band(&raster::Band::Nir).map_err(err)?;
    let grid = water::ndwi(green, nir).map_err(err)?;
    Ok(Mask {
        inner: water::threshold_mask(
            &grid,
            raster.inner.width(),
            raster.inner.height(),
            raster.inner.geo,
            threshold,
        )
        .map_err(err)?,
    })
}

/// Generate a synthetic scene and its ground-truth mask from a SceneSpec
/// JSON string.
#[pyfunction]
fn generate_scene(spec_json: &str) -> PyResult<(Raster, Mask)> {
    let spec: water::SceneSpec = serde_json::from_str(spec_json).map_err(json_err)?;
    let (scene, truth) = water::generate_scene(&spec).map_err(err)?;
    Ok((Raster { inner: scene }, Mask { inner: truth }))
}

/// Run the sensor simulator chain (resample, misalign, PSF, reflectance,
/// tile) from a SimConfig JSON string. An empty esun table means unit gain
/// over the input's bands. Returns the tiles and the misalignment report as
/// JSON.
#[pyfunction]
fn simulate(py: Python<'_>, raster: &Raster, config_json: &str) -> PyResult<(Vec<SimTile>, String)> {
    let mut cfg: sim::SimConfig = serde_json::from_str(config_json).map_err(json_err)?;
    if cfg.solar.esun_per_band.is_empty() {
        cfg.solar = sim::SolarGeometry {
            esun_per_band: sim::SolarGeometry::unit_gain(raster.inner.bands()).esun_per_band,
            ..cfg.solar
        };
    }
    let (tiles, report) = sim::simulate(&raster.inner, &cfg).map_err(err)?;
    let report_json = serde_json::to_string_pretty(&report)
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    let tiles = tiles
        .into_iter()
        .map(|t| {
            Ok(SimTile {
                tile_id: t.id(),
                raster: Py::new(py, Raster { inner: t.raster })?,
                offset_x: t.offset_x,
                offset_y: t.offset_y,
                valid_width: t.valid_width,
                valid_height: t.valid_height,
                padded: t.padded,
            })
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok((tiles, report_json))
}

/// Cut a (raster, mask) pair into 256x256 chips with label masks; chips come
/// back as 4-band rasters [RED, GREEN, BLUE, NDWI].
#[pyfunction]
#[pyo3(signature = (raster, mask, tile_id = "scene"))]
fn extract_chips(raster: &Raster, mask: &Mask, tile_id: &str) -> PyResult<Vec<(Raster, Mask)>> {
    let chips = water::extract_chips(&raster.inner, &mask.inner, tile_id).map_err(err)?;
    Ok(chips
        .into_iter()
        .map(|(chip, label)| {
            (
                Raster {
                    inner: chip.to_raster(),
                },
                Mask { inner: label },
            )
        })
        .collect())
}

/// Intersect a water mask with a road network GeoJSON file.
#[pyfunction]
#[pyo3(signature = (mask, roads_path, sample_spacing_m = None, min_run_m = None,
                    timestamp = "1970-01-01T00:00:00Z", meters_per_unit = None))]
fn intersect_roads(
    mask: &Mask,
    roads_path: PathBuf,
    sample_spacing_m: Option<f64>,
    min_run_m: Option<f64>,
    timestamp: &str,
    meters_per_unit: Option<f64>,
) -> PyResult<Vec<FloodedSegment>> {
    let network = roads::load_roads(&roads_path).map_err(err)?;
    let opts = roads::IntersectOptions {
        sample_spacing_m,
        min_run_m,
        timestamp: timestamp.to_string(),
        meters_per_unit,
    };
    let segments = roads::intersect(&mask.inner, &network, &opts).map_err(err)?;
    Ok(segments
        .into_iter()
        .map(|inner| FloodedSegment { inner })
        .collect())
}

/// Write flooded segments as GeoJSON with an "epsg" foreign member.
#[pyfunction]
fn write_flooded_geojson(segments: Vec<FloodedSegment>, epsg: u32, path: PathBuf) -> PyResult<()> {
    let inner: Vec<roads::FloodedSegment> = segments.into_iter().map(|s| s.inner).collect();
    roads::write_flooded_geojson(&inner, epsg, &path).map_err(err)
}

/// Latency arithmetic from batch timings (seconds per run): per-image mean,
/// chip area, and ms per square kilometer, as JSON.
#[pyfunction]
#[pyo3(signature = (runs, batch_size = 8, warmup = 1, chip_gsd_m = 4.75))]
fn bench_report_from_runs(
    runs: Vec<f64>,
    batch_size: usize,
    warmup: usize,
    chip_gsd_m: f64,
) -> PyResult<String> {
    let report = floodsight_core::bench::report_from_runs(runs, batch_size, warmup, chip_gsd_m)
        .map_err(err)?;
    serde_json::to_string_pretty(&report).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Train the segmentation model on a chip manifest and save it; returns the
/// per-epoch training report as JSON.
#[pyfunction]
#[pyo3(signature = (manifest_path, out_path, model_config_json = None, train_config_json = None))]
fn train_model(
    manifest_path: PathBuf,
    out_path: PathBuf,
    model_config_json: Option<&str>,
    train_config_json: Option<&str>,
) -> PyResult<String> {
    let model_cfg: segnet::ModelConfig = match model_config_json {
        Some(s) => serde_json::from_str(s).map_err(json_err)?,
        None => segnet::ModelConfig::default(),
    };
    let train_cfg: segnet::train::TrainConfig = match train_config_json {
        Some(s) => serde_json::from_str(s).map_err(json_err)?,
        None => segnet::train::TrainConfig::default(),
    };
    let dataset = segnet::train::load_dataset(&manifest_path).map_err(err)?;
    let (params, report) = segnet::train::train(&dataset, &model_cfg, &train_cfg).map_err(err)?;
    container::save_model(&model_cfg, &params, &out_path, container::Encoding::F32).map_err(err)?;
    serde_json::to_string_pretty(&report).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Quantize a saved model to int8 (symmetric per-tensor scales).
#[pyfunction]
fn quantize_model(model_path: PathBuf, out_path: PathBuf) -> PyResult<()> {
    let file = container::load_model(&model_path).map_err(err)?;
    let params = file.dense_params().map_err(err)?;
    let q = floodsight_core::modelopt::quantize_params(&params).map_err(err)?;
    container::save_quantized(&file.config, &q, &out_path).map_err(err)
}

/// Per-encoding byte accounting of a saved model, as JSON.
#[pyfunction]
fn model_size_report(model_path: PathBuf) -> PyResult<String> {
    let file = container::load_model(Path::new(&model_path)).map_err(err)?;
    let params = file.dense_params().map_err(err)?;
    let report = floodsight_core::modelopt::size_report(&params);
    serde_json::to_string_pretty(&report).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
fn floodsight(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<GeoTransform>()?;
    m.add_class::<Raster>()?;
    m.add_class::<Mask>()?;
    m.add_class::<SimTile>()?;
    m.add_class::<FloodedSegment>()?;
    m.add_function(wrap_pyfunction!(ndwi, m)?)?;
    m.add_function(wrap_pyfunction!(threshold_mask, m)?)?;
    m.add_function(wrap_pyfunction!(water_mask, m)?)?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(extract_chips, m)?)?;
    m.add_function(wrap_pyfunction!(intersect_roads, m)?)?;
    m.add_function(wrap_pyfunction!(write_flooded_geojson, m)?)?;
    m.add_function(wrap_pyfunction!(bench_report_from_runs, m)?)?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_function(wrap_pyfunction!(quantize_model, m)?)?;
    m.add_function(wrap_pyfunction!(model_size_report, m)?)?;
    m.add("NDWI_THRESHOLD", water::NDWI_THRESHOLD)?;
    m.add("CHIP_SIZE", water::CHIP_SIZE)?;
    Ok(())
}
