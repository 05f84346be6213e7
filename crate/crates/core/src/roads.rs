//! Road network ingest (RFC 7946 GeoJSON), water-mask intersection, and
//! flooded-segment export for dynamic-map consumers.
//!
//! Intersection is sampling-based: each polyline is resampled along its arc
//! length, every sample is classified against the mask pixel containing it,
//! and maximal wet runs at least `min_run_m` long become flooded segments.

use std::fs;
use std::path::Path;

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::raster::Mask;

/// One road feature: an id, one or more polylines, and passthrough
/// properties.
#[derive(Debug, Clone)]
pub struct RoadFeature {
    pub road_id: String,
    pub polylines: Vec<Vec<(f64, f64)>>,
    pub properties: Map<String, Value>,
}

#[derive(Debug, Clone, Default)]
pub struct RoadNetwork {
    pub features: Vec<RoadFeature>,
    /// CRS of the coordinates, from the "epsg" foreign member when present.
    pub epsg: Option<u32>,
}

impl RoadNetwork {
    pub fn total_polyline_length(&self) -> f64 {
        self.features
            .iter()
            .flat_map(|f| &f.polylines)
            .map(|line| arc_lengths(line).1)
            .sum()
    }
}

fn parse_position(v: &Value, ctx: &str, path: &Path) -> Result<(f64, f64)> {
    let arr = v
        .as_array()
        .ok_or_else(|| Error::geojson(path, format!("{ctx}: position is not an array")))?;
    if arr.len() < 2 {
        return Err(Error::geojson(path, format!("{ctx}: position has < 2 ordinates")));
    }
    let x = arr[0]
        .as_f64()
        .ok_or_else(|| Error::geojson(path, format!("{ctx}: x is not a number")))?;
    let y = arr[1]
        .as_f64()
        .ok_or_else(|| Error::geojson(path, format!("{ctx}: y is not a number")))?;
    if !x.is_finite() || !y.is_finite() {
        return Err(Error::geojson(path, format!("{ctx}: non-finite coordinates")));
    }
    Ok((x, y))
}

fn parse_line(coords: &Value, ctx: &str, path: &Path) -> Result<Vec<(f64, f64)>> {
    let arr = coords
        .as_array()
        .ok_or_else(|| Error::geojson(path, format!("{ctx}: coordinates are not an array")))?;
    if arr.len() < 2 {
        return Err(Error::geojson(
            path,
            format!("{ctx}: polyline has {} vertices, need at least 2", arr.len()),
        ));
    }
    arr.iter()
        .map(|p| parse_position(p, ctx, path))
        .collect()
}

/// Load a GeoJSON FeatureCollection of LineString / MultiLineString roads.
/// Feature ids come from `id_key` in properties, falling back to the feature
/// index.
pub fn load_roads_with_id_key(path: &Path, id_key: &str) -> Result<RoadNetwork> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    if doc.get("type").and_then(Value::as_str) != Some("FeatureCollection") {
        return Err(Error::geojson(path, "not a FeatureCollection"));
    }
    let epsg = doc
        .get("epsg")
        .and_then(Value::as_u64)
        .map(|v| v as u32);
    let features = doc
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::geojson(path, "missing features array"))?;
    let mut out = Vec::with_capacity(features.len());
    for (index, feature) in features.iter().enumerate() {
        let ctx = format!("feature {index}");
        let geometry = feature
            .get("geometry")
            .ok_or_else(|| Error::geojson(path, format!("{ctx}: missing geometry")))?;
        let gtype = geometry
            .get("type")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::geojson(path, format!("{ctx}: missing geometry type")))?;
        let coords = geometry
            .get("coordinates")
            .ok_or_else(|| Error::geojson(path, format!("{ctx}: missing coordinates")))?;
        let polylines = match gtype {
            "LineString" => vec![parse_line(coords, &ctx, path)?],
            "MultiLineString" => {
                let parts = coords.as_array().ok_or_else(|| {
                    Error::geojson(path, format!("{ctx}: coordinates are not an array"))
                })?;
                parts
                    .iter()
                    .enumerate()
                    .map(|(p, c)| parse_line(c, &format!("{ctx} part {p}"), path))
                    .collect::<Result<_>>()?
            }
            other => {
                return Err(Error::geojson(
                    path,
                    format!("{ctx}: unsupported geometry type {other:?}"),
                ))
            }
        };
        let properties = feature
            .get("properties")
            .and_then(Value::as_object)
            .cloned()
            .unwrap_or_default();
        let road_id = match properties.get(id_key) {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            _ => index.to_string(),
        };
        out.push(RoadFeature {
            road_id,
            polylines,
            properties,
        });
    }
    Ok(RoadNetwork {
        features: out,
        epsg,
    })
}

/// [`load_roads_with_id_key`] with the default "id" property key.
pub fn load_roads(path: &Path) -> Result<RoadNetwork> {
    load_roads_with_id_key(path, "id")
}

/// Intersection options. Defaults: sample spacing gsd/2, minimum run three
/// sample spacings, coordinates already in planar meters.
#[derive(Debug, Clone)]
pub struct IntersectOptions {
    pub sample_spacing_m: Option<f64>,
    pub min_run_m: Option<f64>,
    /// Attached to every emitted segment; supplied by the caller so outputs
    /// are reproducible.
    pub timestamp: String,
    /// Conversion from CRS units to meters; geographic (EPSG:4326) inputs
    /// are rejected unless this is set explicitly.
    pub meters_per_unit: Option<f64>,
}

impl Default for IntersectOptions {
    fn default() -> Self {
        IntersectOptions {
            sample_spacing_m: None,
            min_run_m: None,
            timestamp: "1970-01-01T00:00:00Z".to_string(),
            meters_per_unit: None,
        }
    }
}

/// Maximal wet stretch of one road polyline.
#[derive(Debug, Clone)]
pub struct FloodedSegment {
    pub road_id: String,
    pub start: (f64, f64),
    pub end: (f64, f64),
    pub length_m: f64,
    pub sample_count: usize,
    pub timestamp: String,
    /// Every wet sample of the run, in order along the polyline.
    pub samples: Vec<(f64, f64)>,
}

// Cumulative arc lengths of a polyline and its total length (CRS units).
fn arc_lengths(line: &[(f64, f64)]) -> (Vec<f64>, f64) {
    let mut cum = Vec::with_capacity(line.len());
    let mut total = 0.0;
    cum.push(0.0);
    for w in line.windows(2) {
        let (x0, y0) = w[0];
        let (x1, y1) = w[1];
        total += ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt();
        cum.push(total);
    }
    (cum, total)
}

// Point at arc position s along the polyline.
fn point_at(line: &[(f64, f64)], cum: &[f64], s: f64) -> (f64, f64) {
    match cum.binary_search_by(|c| c.partial_cmp(&s).expect("finite arc lengths")) {
        Ok(i) => line[i],
        Err(i) => {
            let i = i.clamp(1, line.len() - 1);
            let seg = cum[i] - cum[i - 1];
            let t = if seg == 0.0 { 0.0 } else { (s - cum[i - 1]) / seg };
            let (x0, y0) = line[i - 1];
            let (x1, y1) = line[i];
            (x0 + t * (x1 - x0), y0 + t * (y1 - y0))
        }
    }
}

/// Arc-length positions at `spacing` intervals, endpoints included.
pub fn sample_positions(total: f64, spacing: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let n = (total / spacing).floor() as usize;
    for k in 0..=n {
        out.push(k as f64 * spacing);
    }
    if let Some(last) = out.last() {
        if (total - last) > 1e-9 * total.max(1.0) {
            out.push(total);
        }
    }
    out
}

/// True when the mask pixel containing the point is wet; out-of-raster
/// samples are dry.
pub fn sample_is_wet(mask: &Mask, x: f64, y: f64) -> bool {
    let (col, row) = mask.geo.world_to_pixel(x, y);
    let (c, r) = (col.floor(), row.floor());
    if c < 0.0 || r < 0.0 || c >= mask.width() as f64 || r >= mask.height() as f64 {
        return false;
    }
    mask.get(c as usize, r as usize) == 1
}

/// Intersect a georeferenced water mask with a road network.
pub fn intersect(
    mask: &Mask,
    roads: &RoadNetwork,
    opts: &IntersectOptions,
) -> Result<Vec<FloodedSegment>> {
    if let Some(epsg) = roads.epsg {
        if epsg != mask.geo.epsg {
            return Err(Error::CrsMismatch(format!(
                "roads are EPSG:{epsg}, mask is EPSG:{}",
                mask.geo.epsg
            )));
        }
    }
    let meters_per_unit = match opts.meters_per_unit {
        Some(m) if m > 0.0 => m,
        Some(m) => {
            return Err(Error::InvalidConfig(format!(
                "meters_per_unit must be positive, got {m}"
            )))
        }
        None => {
            if roads.epsg == Some(4326) || mask.geo.epsg == 4326 {
                return Err(Error::CrsMismatch(
                    "geographic (EPSG:4326) coordinates: lengths are not meters; \
                     set meters_per_unit explicitly"
                        .into(),
                ));
            }
            1.0
        }
    };
    let gsd = mask.geo.pixel_size_x;
    if !(gsd > 0.0) {
        return Err(Error::InvalidConfig("mask gsd must be positive".into()));
    }
    let spacing_m = opts.sample_spacing_m.unwrap_or(gsd * meters_per_unit / 2.0);
    if !(spacing_m > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "sample spacing must be positive, got {spacing_m}"
        )));
    }
    let min_run_m = opts.min_run_m.unwrap_or(3.0 * spacing_m);
    let spacing_units = spacing_m / meters_per_unit;

    let mut segments = Vec::new();
    // iterate features sorted by road id for deterministic output order
    let mut order: Vec<usize> = (0..roads.features.len()).collect();
    order.sort_by(|a, b| {
        roads.features[*a]
            .road_id
            .cmp(&roads.features[*b].road_id)
            .then(a.cmp(b))
    });
    for fi in order {
        let feature = &roads.features[fi];
        for line in &feature.polylines {
            let (cum, total) = arc_lengths(line);
            let positions = sample_positions(total, spacing_units);
            let points: Vec<(f64, f64)> = positions
                .iter()
                .map(|s| point_at(line, &cum, *s))
                .collect();
            let wet: Vec<bool> = points
                .iter()
                .map(|(x, y)| sample_is_wet(mask, *x, *y))
                .collect();
            let mut i = 0;
            while i < wet.len() {
                if !wet[i] {
                    i += 1;
                    continue;
                }
                let mut j = i;
                while j + 1 < wet.len() && wet[j + 1] {
                    j += 1;
                }
                let run_m = (positions[j] - positions[i]) * meters_per_unit;
                if run_m >= min_run_m {
                    segments.push(FloodedSegment {
                        road_id: feature.road_id.clone(),
                        start: points[i],
                        end: points[j],
                        length_m: run_m,
                        sample_count: j - i + 1,
                        timestamp: opts.timestamp.clone(),
                        samples: points[i..=j].to_vec(),
                    });
                }
                i = j + 1;
            }
        }
    }
    Ok(segments)
}

/// Write flooded segments as a GeoJSON FeatureCollection with an "epsg"
/// foreign member; one LineString feature per segment.
pub fn write_flooded_geojson(segments: &[FloodedSegment], epsg: u32, path: &Path) -> Result<()> {
    let features: Vec<Value> = segments
        .iter()
        .map(|s| {
            json!({
                "type": "Feature",
                "geometry": {
                    "type": "LineString",
                    "coordinates": s.samples.iter().map(|(x, y)| json!([x, y])).collect::<Vec<_>>(),
                },
                "properties": {
                    "road_id": s.road_id,
                    "length_m": s.length_m,
                    "timestamp": s.timestamp,
                    "sample_count": s.sample_count,
                },
            })
        })
        .collect();
    let doc = json!({
        "type": "FeatureCollection",
        "epsg": epsg,
        "features": features,
    });
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::GeoTransform;

    fn write_geojson(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let path = dir.join(name);
        fs::write(&path, body).unwrap();
        path
    }

    fn geo16() -> GeoTransform {
        GeoTransform::new(0.0, 16.0 * 4.75, 4.75, 4.75, 32643).unwrap()
    }

    #[test]
    fn load_feature_collection_with_two_linestrings() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_geojson(
            dir.path(),
            "roads.geojson",
            r#"{
                "type": "FeatureCollection",
                "features": [
                    {"type": "Feature",
                     "geometry": {"type": "LineString", "coordinates": [[0,0],[10,0]]},
                     "properties": {"id": "a"}},
                    {"type": "Feature",
                     "geometry": {"type": "LineString", "coordinates": [[0,5],[10,5],[10,15]]},
                     "properties": {}}
                ]
            }"#,
        );
        let net = load_roads(&path).unwrap();
        assert_eq!(net.features.len(), 2);
        assert_eq!(net.features[0].road_id, "a");
        assert_eq!(net.features[1].road_id, "1"); // index fallback
        assert_eq!(net.epsg, None);
    }

    #[test]
    fn multilinestring_is_one_feature_many_polylines() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_geojson(
            dir.path(),
            "multi.geojson",
            r#"{
                "type": "FeatureCollection",
                "epsg": 32643,
                "features": [
                    {"type": "Feature",
                     "geometry": {"type": "MultiLineString",
                                  "coordinates": [[[0,0],[1,0]], [[2,0],[3,0]], [[4,0],[5,0]]]},
                     "properties": {"id": 7}}
                ]
            }"#,
        );
        let net = load_roads(&path).unwrap();
        assert_eq!(net.features.len(), 1);
        assert_eq!(net.features[0].polylines.len(), 3);
        assert_eq!(net.features[0].road_id, "7");
        assert_eq!(net.epsg, Some(32643));
    }

    #[test]
    fn polygon_feature_is_rejected_with_index() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_geojson(
            dir.path(),
            "bad.geojson",
            r#"{
                "type": "FeatureCollection",
                "features": [
                    {"type": "Feature",
                     "geometry": {"type": "Polygon", "coordinates": [[[0,0],[1,0],[1,1],[0,0]]]},
                     "properties": {}}
                ]
            }"#,
        );
        match load_roads(&path) {
            Err(Error::GeoJson { reason, .. }) => {
                assert!(reason.contains("feature 0"), "{reason}");
                assert!(reason.contains("Polygon"), "{reason}");
            }
            other => panic!("expected geojson error, got {other:?}"),
        }
    }

    fn mask_with_block(cols: std::ops::RangeInclusive<usize>, rows: std::ops::RangeInclusive<usize>) -> Mask {
        let mut m = Mask::zeros(16, 16, geo16()).unwrap();
        for r in rows {
            for c in cols.clone() {
                m.set(c, r, 1);
            }
        }
        m
    }

    fn straight_road(y: f64) -> RoadNetwork {
        RoadNetwork {
            features: vec![RoadFeature {
                road_id: "r1".to_string(),
                polylines: vec![vec![(0.0, y), (16.0 * 4.75, y)]],
                properties: Map::new(),
            }],
            epsg: Some(32643),
        }
    }

    #[test]
    fn all_dry_mask_yields_no_segments() {
        let mask = Mask::zeros(16, 16, geo16()).unwrap();
        let roads = straight_road(40.0);
        let segments = intersect(&mask, &roads, &IntersectOptions::default()).unwrap();
        assert!(segments.is_empty());
    }

    #[test]
    fn all_wet_mask_yields_full_span_segment() {
        let mask = Mask::new(16, 16, vec![1; 256], geo16()).unwrap();
        let roads = straight_road(40.0);
        let segments = intersect(&mask, &roads, &IntersectOptions::default()).unwrap();
        assert_eq!(segments.len(), 1);
        let total = 16.0 * 4.75;
        // every in-bounds sample is wet; the last sample (x = 76) falls
        // outside the raster, so the run ends one spacing earlier
        assert!(segments[0].length_m >= total - 2.0 * 2.375);
        assert!(segments[0].length_m <= total);
    }

    #[test]
    fn hand_case_wet_block_length() {
        // wet block cols 4..=11, rows 7..=8; horizontal road through row 7.5
        let mask = mask_with_block(4..=11, 7..=8);
        let y = 16.0 * 4.75 - 7.5 * 4.75; // world y of pixel row 7.5
        let roads = straight_road(y);
        let segments = intersect(&mask, &roads, &IntersectOptions::default()).unwrap();
        assert_eq!(segments.len(), 1);
        let expect = 8.0 * 4.75; // 38 m
        let spacing = 4.75 / 2.0;
        assert!(
            (segments[0].length_m - expect).abs() <= spacing + 1e-9,
            "length {} not within one spacing of {expect}",
            segments[0].length_m
        );
    }

    #[test]
    fn short_runs_are_suppressed_by_min_run() {
        // single wet pixel: run of ~2 samples, below the 3-spacing default
        let mask = mask_with_block(8..=8, 7..=8);
        let y = 16.0 * 4.75 - 7.5 * 4.75;
        let roads = straight_road(y);
        let segments = intersect(&mask, &roads, &IntersectOptions::default()).unwrap();
        assert!(segments.is_empty());
    }

    #[test]
    fn crs_mismatch_and_geographic_inputs_rejected() {
        let mask = Mask::zeros(16, 16, geo16()).unwrap();
        let mut roads = straight_road(40.0);
        roads.epsg = Some(3857);
        assert!(matches!(
            intersect(&mask, &roads, &IntersectOptions::default()),
            Err(Error::CrsMismatch(_))
        ));
        let geo_wgs84 = GeoTransform::new(77.0, 13.0, 0.0001, 0.0001, 4326).unwrap();
        let mask = Mask::zeros(16, 16, geo_wgs84).unwrap();
        roads.epsg = Some(4326);
        assert!(intersect(&mask, &roads, &IntersectOptions::default()).is_err());
        // explicit meters-per-unit override allows it
        let opts = IntersectOptions {
            meters_per_unit: Some(111_320.0),
            ..IntersectOptions::default()
        };
        assert!(intersect(&mask, &roads, &opts).is_ok());
    }

    #[test]
    fn monotone_under_added_water() {
        let mask_small = mask_with_block(4..=7, 7..=8);
        let mask_big = mask_with_block(4..=11, 7..=8);
        let y = 16.0 * 4.75 - 7.5 * 4.75;
        let roads = straight_road(y);
        let a = intersect(&mask_small, &roads, &IntersectOptions::default()).unwrap();
        let b = intersect(&mask_big, &roads, &IntersectOptions::default()).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(b.len(), 1);
        assert!(b[0].length_m >= a[0].length_m);
    }

    #[test]
    fn geojson_round_trip() {
        let mask = mask_with_block(4..=11, 7..=8);
        let y = 16.0 * 4.75 - 7.5 * 4.75;
        let roads = straight_road(y);
        let segments = intersect(&mask, &roads, &IntersectOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("flooded.geojson");
        write_flooded_geojson(&segments, 32643, &path).unwrap();
        let back = load_roads(&path).unwrap();
        assert_eq!(back.features.len(), segments.len());
        assert_eq!(back.epsg, Some(32643));
        let line = &back.features[0].polylines[0];
        assert_eq!(line.len(), segments[0].sample_count);
        for (a, b) in line.iter().zip(&segments[0].samples) {
            assert!((a.0 - b.0).abs() < 1e-9);
            assert!((a.1 - b.1).abs() < 1e-9);
        }
        assert_eq!(
            back.features[0].properties.get("road_id"),
            Some(&Value::String("r1".to_string()))
        );
    }

    #[test]
    fn empty_segment_list_writes_valid_collection() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.geojson");
        write_flooded_geojson(&[], 32643, &path).unwrap();
        let net = load_roads(&path).unwrap();
        assert!(net.features.is_empty());
    }
}
