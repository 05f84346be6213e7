//! Raster bundle data model, file I/O, and geotransform math.
//!
//! A "raster bundle" is the on-disk unit every stage exchanges: a `<stem>.json`
//! metadata sidecar plus a `<stem>.bin` raw payload (band-sequential, row-major
//! within band, little-endian). Image payloads are float32; masks are unsigned
//! 8-bit with values in {0,1}.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Affine georeferencing for a north-up raster.
///
/// The origin is the top-left corner of pixel (0,0); pixel centers sit at
/// (col + 0.5, row + 0.5). Northing decreases with increasing row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoTransform {
    pub origin_x: f64,
    pub origin_y: f64,
    pub pixel_size_x: f64,
    pub pixel_size_y: f64,
    pub epsg: u32,
}

impl GeoTransform {
    pub fn new(
        origin_x: f64,
        origin_y: f64,
        pixel_size_x: f64,
        pixel_size_y: f64,
        epsg: u32,
    ) -> Result<Self> {
        if !(pixel_size_x > 0.0) || !(pixel_size_y > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "pixel sizes must be positive, got ({pixel_size_x}, {pixel_size_y})"
            )));
        }
        if epsg == 0 {
            return Err(Error::InvalidConfig("epsg must be positive".into()));
        }
        Ok(GeoTransform {
            origin_x,
            origin_y,
            pixel_size_x,
            pixel_size_y,
            epsg,
        })
    }

    /// Pixel-space (col, row) to world (x, y). Accepts fractional pixels.
    pub fn pixel_to_world(&self, col: f64, row: f64) -> (f64, f64) {
        (
            self.origin_x + col * self.pixel_size_x,
            self.origin_y - row * self.pixel_size_y,
        )
    }

    /// Exact inverse of [`pixel_to_world`](Self::pixel_to_world). Callers bound-check.
    pub fn world_to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x - self.origin_x) / self.pixel_size_x,
            (self.origin_y - y) / self.pixel_size_y,
        )
    }

    /// Geotransform of a window whose top-left pixel is (col_off, row_off).
    pub fn offset(&self, col_off: usize, row_off: usize) -> GeoTransform {
        let (x, y) = self.pixel_to_world(col_off as f64, row_off as f64);
        GeoTransform {
            origin_x: x,
            origin_y: y,
            ..*self
        }
    }

    /// Same origin, new square pixel size.
    pub fn with_pixel_size(&self, size: f64) -> GeoTransform {
        GeoTransform {
            pixel_size_x: size,
            pixel_size_y: size,
            ..*self
        }
    }
}

/// Spectral band label carried in raster metadata.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Band {
    Red,
    Green,
    Blue,
    Nir,
    Ndwi,
    Other(String),
}

impl Band {
    pub fn label(&self) -> &str {
        match self {
            Band::Red => "RED",
            Band::Green => "GREEN",
            Band::Blue => "BLUE",
            Band::Nir => "NIR",
            Band::Ndwi => "NDWI",
            Band::Other(s) => s,
        }
    }

    pub fn from_label(label: &str) -> Band {
        match label {
            "RED" => Band::Red,
            "GREEN" => Band::Green,
            "BLUE" => Band::Blue,
            "NIR" => Band::Nir,
            "NDWI" => Band::Ndwi,
            other => Band::Other(other.to_string()),
        }
    }
}

impl std::fmt::Display for Band {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl Serialize for Band {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.label())
    }
}

impl<'de> Deserialize<'de> for Band {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(Band::from_label(&s))
    }
}

/// Multi-band float32 pixel grid with georeferencing.
///
/// Data is band-sequential (band-major), row-major within each band.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    bands: Vec<Band>,
    data: Vec<f32>,
    pub geo: GeoTransform,
    pub nodata: Option<f32>,
}

impl Raster {
    pub fn new(
        width: usize,
        height: usize,
        bands: Vec<Band>,
        data: Vec<f32>,
        geo: GeoTransform,
        nodata: Option<f32>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidRaster(format!(
                "dimensions must be positive, got {width}x{height}"
            )));
        }
        if bands.is_empty() {
            return Err(Error::InvalidRaster("at least one band required".into()));
        }
        for (i, b) in bands.iter().enumerate() {
            if bands[..i].contains(b) {
                return Err(Error::InvalidRaster(format!("duplicate band label {b}")));
            }
        }
        let expect = width * height * bands.len();
        if data.len() != expect {
            return Err(Error::InvalidRaster(format!(
                "payload length {} does not match {}x{}x{} = {}",
                data.len(),
                width,
                height,
                bands.len(),
                expect
            )));
        }
        Ok(Raster {
            width,
            height,
            bands,
            data,
            geo,
            nodata,
        })
    }

    /// Build from per-band grids, each of length `width * height`.
    pub fn from_bands(
        width: usize,
        height: usize,
        bands: Vec<(Band, Vec<f32>)>,
        geo: GeoTransform,
    ) -> Result<Self> {
        let mut labels = Vec::with_capacity(bands.len());
        let mut data = Vec::with_capacity(width * height * bands.len());
        for (band, grid) in bands {
            if grid.len() != width * height {
                return Err(Error::InvalidRaster(format!(
                    "band {band} grid length {} != {}",
                    grid.len(),
                    width * height
                )));
            }
            labels.push(band);
            data.extend_from_slice(&grid);
        }
        Raster::new(width, height, labels, data, geo, None)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bands(&self) -> &[Band] {
        &self.bands
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixels_per_band(&self) -> usize {
        self.width * self.height
    }

    pub fn band_index(&self, band: &Band) -> Option<usize> {
        self.bands.iter().position(|b| b == band)
    }

    /// Grid of one band, row-major.
    pub fn band(&self, band: &Band) -> Result<&[f32]> {
        let i = self
            .band_index(band)
            .ok_or_else(|| Error::MissingBand(band.label().to_string()))?;
        Ok(self.band_at(i))
    }

    pub fn band_at(&self, index: usize) -> &[f32] {
        let n = self.pixels_per_band();
        &self.data[index * n..(index + 1) * n]
    }

    pub fn band_at_mut(&mut self, index: usize) -> &mut [f32] {
        let n = self.pixels_per_band();
        &mut self.data[index * n..(index + 1) * n]
    }

    pub fn get(&self, band: usize, col: usize, row: usize) -> f32 {
        self.data[band * self.pixels_per_band() + row * self.width + col]
    }

    /// Copy of a rectangular window, all bands.
    pub fn window(&self, col_off: usize, row_off: usize, w: usize, h: usize) -> Result<Raster> {
        if col_off + w > self.width || row_off + h > self.height {
            return Err(Error::ShapeMismatch(format!(
                "window {w}x{h}+{col_off}+{row_off} exceeds raster {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h * self.bands.len());
        for b in 0..self.bands.len() {
            let src = self.band_at(b);
            for r in 0..h {
                let start = (row_off + r) * self.width + col_off;
                data.extend_from_slice(&src[start..start + w]);
            }
        }
        Raster::new(
            w,
            h,
            self.bands.clone(),
            data,
            self.geo.offset(col_off, row_off),
            self.nodata,
        )
    }
}

/// Binary water mask aligned to a raster grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    width: usize,
    height: usize,
    values: Vec<u8>,
    pub geo: GeoTransform,
}

impl Mask {
    pub fn new(width: usize, height: usize, values: Vec<u8>, geo: GeoTransform) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidRaster(format!(
                "mask dimensions must be positive, got {width}x{height}"
            )));
        }
        if values.len() != width * height {
            return Err(Error::InvalidRaster(format!(
                "mask payload length {} != {}x{}",
                values.len(),
                width,
                height
            )));
        }
        if let Some(v) = values.iter().find(|v| **v > 1) {
            return Err(Error::InvalidRaster(format!(
                "mask values must be 0 or 1, found {v}"
            )));
        }
        Ok(Mask {
            width,
            height,
            values,
            geo,
        })
    }

    pub fn zeros(width: usize, height: usize, geo: GeoTransform) -> Result<Self> {
        Mask::new(width, height, vec![0; width * height], geo)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, col: usize, row: usize) -> u8 {
        self.values[row * self.width + col]
    }

    pub fn set(&mut self, col: usize, row: usize, v: u8) {
        debug_assert!(v <= 1);
        self.values[row * self.width + col] = v;
    }

    pub fn count_ones(&self) -> usize {
        self.values.iter().filter(|v| **v == 1).count()
    }

    pub fn window(&self, col_off: usize, row_off: usize, w: usize, h: usize) -> Result<Mask> {
        if col_off + w > self.width || row_off + h > self.height {
            return Err(Error::ShapeMismatch(format!(
                "window {w}x{h}+{col_off}+{row_off} exceeds mask {}x{}",
                self.width, self.height
            )));
        }
        let mut values = Vec::with_capacity(w * h);
        for r in 0..h {
            let start = (row_off + r) * self.width + col_off;
            values.extend_from_slice(&self.values[start..start + w]);
        }
        Mask::new(w, h, values, self.geo.offset(col_off, row_off))
    }
}

#[derive(Serialize, Deserialize)]
struct GeoMeta {
    origin_x: f64,
    origin_y: f64,
    pixel_size_x: f64,
    pixel_size_y: f64,
}

#[derive(Serialize, Deserialize)]
struct BundleMeta {
    width: usize,
    height: usize,
    bands: Vec<String>,
    dtype: String,
    geotransform: GeoMeta,
    epsg: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    nodata: Option<f32>,
}

impl BundleMeta {
    fn geo(&self) -> Result<GeoTransform> {
        GeoTransform::new(
            self.geotransform.origin_x,
            self.geotransform.origin_y,
            self.geotransform.pixel_size_x,
            self.geotransform.pixel_size_y,
            self.epsg,
        )
    }

    fn from_geo(geo: &GeoTransform) -> GeoMeta {
        GeoMeta {
            origin_x: geo.origin_x,
            origin_y: geo.origin_y,
            pixel_size_x: geo.pixel_size_x,
            pixel_size_y: geo.pixel_size_y,
        }
    }
}

/// `<stem>.json` / `<stem>.bin` paths for a bundle stem.
pub fn bundle_paths(stem: &Path) -> (PathBuf, PathBuf) {
    let mut json = stem.as_os_str().to_owned();
    json.push(".json");
    let mut bin = stem.as_os_str().to_owned();
    bin.push(".bin");
    (PathBuf::from(json), PathBuf::from(bin))
}

fn read_meta(stem: &Path) -> Result<(BundleMeta, Vec<u8>, PathBuf)> {
    let (json_path, bin_path) = bundle_paths(stem);
    let meta_text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let meta: BundleMeta =
        serde_json::from_str(&meta_text).map_err(|e| Error::json(&json_path, e))?;
    if meta.width == 0 || meta.height == 0 {
        return Err(Error::bundle(
            &json_path,
            format!("non-positive dimensions {}x{}", meta.width, meta.height),
        ));
    }
    let payload = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    Ok((meta, payload, bin_path))
}

/// Load a float32 raster bundle from `<stem>.json` + `<stem>.bin`.
pub fn load_raster(stem: &Path) -> Result<Raster> {
    let (meta, payload, bin_path) = read_meta(stem)?;
    if meta.dtype != "f32" {
        return Err(Error::bundle(
            &bin_path,
            format!("unknown dtype {:?} (expected \"f32\")", meta.dtype),
        ));
    }
    let expect = meta.width * meta.height * meta.bands.len() * 4;
    if payload.len() != expect {
        return Err(Error::bundle(
            &bin_path,
            format!("payload is {} bytes, expected {expect}", payload.len()),
        ));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let bands = meta.bands.iter().map(|s| Band::from_label(s)).collect();
    Raster::new(
        meta.width,
        meta.height,
        bands,
        data,
        meta.geo()?,
        meta.nodata,
    )
}

/// Save a raster bundle to `<stem>.json` + `<stem>.bin`. Round-trips bit-exactly.
pub fn save_raster(r: &Raster, stem: &Path) -> Result<()> {
    let (json_path, bin_path) = bundle_paths(stem);
    let meta = BundleMeta {
        width: r.width,
        height: r.height,
        bands: r.bands.iter().map(|b| b.label().to_string()).collect(),
        dtype: "f32".to_string(),
        geotransform: BundleMeta::from_geo(&r.geo),
        epsg: r.geo.epsg,
        nodata: r.nodata,
    };
    if let Some(parent) = json_path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::json(&json_path, e))?;
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    let mut bytes = Vec::with_capacity(r.data.len() * 4);
    for v in &r.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&bin_path, bytes).map_err(|e| Error::io(&bin_path, e))
}

/// Load a u8 mask bundle from `<stem>.json` + `<stem>.bin`.
pub fn load_mask(stem: &Path) -> Result<Mask> {
    let (meta, payload, bin_path) = read_meta(stem)?;
    if meta.dtype != "u8" {
        return Err(Error::bundle(
            &bin_path,
            format!("unknown dtype {:?} (expected \"u8\")", meta.dtype),
        ));
    }
    if meta.bands.len() != 1 {
        return Err(Error::bundle(
            &bin_path,
            format!("mask bundle must have 1 band, found {}", meta.bands.len()),
        ));
    }
    let expect = meta.width * meta.height;
    if payload.len() != expect {
        return Err(Error::bundle(
            &bin_path,
            format!("payload is {} bytes, expected {expect}", payload.len()),
        ));
    }
    Mask::new(meta.width, meta.height, payload, meta.geo()?)
}

/// Save a mask bundle (dtype "u8", single band labelled MASK).
pub fn save_mask(m: &Mask, stem: &Path) -> Result<()> {
    let (json_path, bin_path) = bundle_paths(stem);
    let meta = BundleMeta {
        width: m.width,
        height: m.height,
        bands: vec!["MASK".to_string()],
        dtype: "u8".to_string(),
        geotransform: BundleMeta::from_geo(&m.geo),
        epsg: m.geo.epsg,
        nodata: None,
    };
    if let Some(parent) = json_path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::json(&json_path, e))?;
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    fs::write(&bin_path, &m.values).map_err(|e| Error::io(&bin_path, e))
}
