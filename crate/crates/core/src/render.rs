//! Diagnostic PNG overlays: RGB composite, water mask tint, road polylines,
//! and flooded segments. For human inspection only.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::raster::{Band, Mask, Raster};
use crate::roads::{FloodedSegment, RoadNetwork};

fn percentile_scale(values: &[f32]) -> (f32, f32) {
    let mut sorted: Vec<f32> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if sorted.is_empty() {
        return (0.0, 1.0);
    }
    sorted.sort_by(f32::total_cmp);
    let lo = sorted[(sorted.len() - 1) * 2 / 100];
    let hi = sorted[(sorted.len() - 1) * 98 / 100];
    if hi > lo {
        (lo, hi)
    } else {
        (lo, lo + 1.0)
    }
}

fn to_u8(v: f32, lo: f32, hi: f32) -> u8 {
    (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0) as u8
}

/// Render an RGB composite (falling back to the first band as gray) with
/// optional mask tint, roads, and flooded segments.
pub fn render_overlay(
    raster: Option<&Raster>,
    mask: Option<&Mask>,
    roads: Option<&RoadNetwork>,
    flooded: Option<&[FloodedSegment]>,
    path: &Path,
) -> Result<()> {
    let (width, height, geo) = match (raster, mask) {
        (Some(r), _) => (r.width(), r.height(), r.geo),
        (None, Some(m)) => (m.width(), m.height(), m.geo),
        (None, None) => {
            return Err(Error::InvalidConfig(
                "render needs a raster or a mask".into(),
            ))
        }
    };
    let mut img = RgbImage::new(width as u32, height as u32);

    if let Some(r) = raster {
        let rgb = [Band::Red, Band::Green, Band::Blue];
        if rgb.iter().all(|b| r.band_index(b).is_some()) {
            let channels: Vec<(&[f32], f32, f32)> = rgb
                .iter()
                .map(|b| {
                    let grid = r.band(b).expect("checked above");
                    let (lo, hi) = percentile_scale(grid);
                    (grid, lo, hi)
                })
                .collect();
            for y in 0..height {
                for x in 0..width {
                    let i = y * width + x;
                    img.put_pixel(
                        x as u32,
                        y as u32,
                        Rgb([
                            to_u8(channels[0].0[i], channels[0].1, channels[0].2),
                            to_u8(channels[1].0[i], channels[1].1, channels[1].2),
                            to_u8(channels[2].0[i], channels[2].1, channels[2].2),
                        ]),
                    );
                }
            }
        } else {
            let grid = r.band_at(0);
            let (lo, hi) = percentile_scale(grid);
            for y in 0..height {
                for x in 0..width {
                    let v = to_u8(grid[y * width + x], lo, hi);
                    img.put_pixel(x as u32, y as u32, Rgb([v, v, v]));
                }
            }
        }
    }

    if let Some(m) = mask {
        if m.width() != width || m.height() != height {
            return Err(Error::ShapeMismatch(format!(
                "mask {}x{} does not match canvas {width}x{height}",
                m.width(),
                m.height()
            )));
        }
        for y in 0..height {
            for x in 0..width {
                if m.get(x, y) == 1 {
                    let p = img.get_pixel(x as u32, y as u32);
                    let blend = |c: u8, t: u8| ((c as u16 + 2 * t as u16) / 3) as u8;
                    img.put_pixel(
                        x as u32,
                        y as u32,
                        Rgb([blend(p[0], 30), blend(p[1], 90), blend(p[2], 220)]),
                    );
                }
            }
        }
    }

    let mut draw_line = |a: (f64, f64), b: (f64, f64), color: Rgb<u8>| {
        let (c0, r0) = geo.world_to_pixel(a.0, a.1);
        let (c1, r1) = geo.world_to_pixel(b.0, b.1);
        let steps = ((c1 - c0).abs().max((r1 - r0).abs()).ceil() as usize).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let c = c0 + t * (c1 - c0);
            let r = r0 + t * (r1 - r0);
            if c >= 0.0 && r >= 0.0 && (c as usize) < width && (r as usize) < height {
                img.put_pixel(c as u32, r as u32, color);
            }
        }
    };

    if let Some(net) = roads {
        for feature in &net.features {
            for line in &feature.polylines {
                for w in line.windows(2) {
                    draw_line(w[0], w[1], Rgb([70, 70, 70]));
                }
            }
        }
    }
    if let Some(segments) = flooded {
        for seg in segments {
            for w in seg.samples.windows(2) {
                draw_line(w[0], w[1], Rgb([230, 40, 40]));
            }
        }
    }

    img.save(path)
        .map_err(|e| Error::InvalidConfig(format!("png write {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::GeoTransform;
    use crate::water::{generate_scene, BandLevels, SceneSpec};

    #[test]
    fn renders_scene_with_mask() {
        let spec = SceneSpec {
            width: 64,
            height: 48,
            gsd: 4.75,
            epsg: 32643,
            origin: None,
            water_polygons: vec![vec![(8.0, 8.0), (40.0, 8.0), (40.0, 30.0), (8.0, 30.0)]],
            water_levels: BandLevels::water_default(),
            land_levels: BandLevels::land_default(),
            noise_sigma: 0.0,
            seed: 0,
        };
        let (scene, truth) = generate_scene(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("overlay.png");
        render_overlay(Some(&scene), Some(&truth), None, None, &path).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (64, 48));
        // water pixels lean blue
        let water = img.get_pixel(20, 20);
        let land = img.get_pixel(55, 40);
        assert!(water[2] > land[2]);
    }

    #[test]
    fn mask_only_render_works() {
        let geo = GeoTransform::new(0.0, 10.0, 1.0, 1.0, 32643).unwrap();
        let mask = Mask::new(4, 4, vec![1; 16], geo).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.png");
        render_overlay(None, Some(&mask), None, None, &path).unwrap();
        assert!(path.exists());
    }
}
