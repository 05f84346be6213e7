#!/usr/bin/env python3
"""Smoke test for the floodsight Python bindings.

Builds nothing itself: expects `cargo build -p floodsight-py` (or --release)
to have produced target/<profile>/libfloodsight.so. Links the cdylib into a
temp directory under its import name and drives scene synthesis, NDWI
segmentation, the sensor simulator, road intersection, and the latency
arithmetic.
"""

import json
import math
import os
import sys
import tempfile

REPO = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def import_floodsight():
    candidates = [
        os.path.join(REPO, "target", profile, "libfloodsight.so")
        for profile in ("release", "debug")
    ]
    lib = next((c for c in candidates if os.path.exists(c)), None)
    if lib is None:
        sys.exit(
            "libfloodsight.so not found; run `cargo build -p floodsight-py` first"
        )
    link_dir = tempfile.mkdtemp(prefix="floodsight_py_")
    os.symlink(lib, os.path.join(link_dir, "floodsight.so"))
    sys.path.insert(0, link_dir)
    import floodsight

    return floodsight


def main():
    fs = import_floodsight()
    tmp = tempfile.mkdtemp(prefix="floodsight_smoke_")

    # --- scene synthesis and NDWI segmentation -----------------------------
    spec = {
        "width": 256,
        "height": 256,
        "gsd": 4.75,
        "water_polygons": [[[40, 40], [200, 40], [200, 160], [40, 160]]],
        "noise_sigma": 0.0,
        "seed": 5,
    }
    scene, truth = fs.generate_scene(json.dumps(spec))
    assert scene.width == 256 and scene.height == 256
    assert scene.bands == ["RED", "GREEN", "BLUE", "NIR"]
    # rectangle covers cols 40..199 x rows 40..159 at pixel centers
    assert truth.count_ones() == 160 * 120

    mask = fs.water_mask(scene, threshold=fs.NDWI_THRESHOLD)
    assert mask.values() == truth.values(), "noise-free threshold must equal truth"
    area = mask.area_hectares(4.75)
    expect_area = 160 * 120 * 4.75**2 / 1e4
    assert abs(area - expect_area) < 1e-9, (area, expect_area)

    # ndwi arithmetic spot check: (0.3 - 0.05) / 0.35
    nd = fs.ndwi([0.3], [0.05])
    assert abs(nd[0] - 0.25 / 0.35) < 1e-6

    # --- geotransform round trip -------------------------------------------
    geo = scene.geo
    x, y = geo.pixel_to_world(2.0, 3.0)
    c, r = geo.world_to_pixel(x, y)
    assert abs(c - 2.0) < 1e-9 and abs(r - 3.0) < 1e-9

    # --- raster bundle round trip ------------------------------------------
    stem = os.path.join(tmp, "scene")
    scene.save(stem)
    back = fs.Raster.load(stem)
    assert back.band("NIR") == scene.band("NIR")

    # --- sensor simulator ---------------------------------------------------
    sim_cfg = {"tile_size": 256, "seed": 9}
    tiles, report = fs.simulate(scene, json.dumps(sim_cfg))
    report = json.loads(report)
    assert report["reference_band"] == "GREEN"
    assert all(s["dx_m"] == 0.0 for s in report["shifts"] if s["band"] == "GREEN")
    assert 0.0 < report["rmse_m"] < 10.0
    assert all(t.raster.geo.pixel_size_x == 4.75 for t in tiles)
    assert sum(1 for t in tiles if not t.padded) >= 1

    # --- chips ---------------------------------------------------------------
    chips = fs.extract_chips(scene, truth, "smoke")
    assert len(chips) == 1
    chip, label = chips[0]
    assert chip.bands == ["RED", "GREEN", "BLUE", "NDWI"]
    assert label.count_ones() == truth.count_ones()

    # --- road intersection ---------------------------------------------------
    # horizontal road through the middle of the planted rectangle
    row = 100.5
    y_road = geo.pixel_to_world(0, row)[1]
    x_end = geo.pixel_to_world(256, 0)[0]
    roads = {
        "type": "FeatureCollection",
        "epsg": geo.epsg,
        "features": [
            {
                "type": "Feature",
                "geometry": {
                    "type": "LineString",
                    "coordinates": [[0, y_road], [x_end, y_road]],
                },
                "properties": {"id": "main-street"},
            }
        ],
    }
    roads_path = os.path.join(tmp, "roads.geojson")
    with open(roads_path, "w") as f:
        json.dump(roads, f)
    segments = fs.intersect_roads(mask, roads_path, timestamp="2022-09-05T00:00:00Z")
    assert len(segments) == 1, segments
    seg = segments[0]
    expect_len = 160 * 4.75  # wet cols 40..199
    spacing = 4.75 / 2
    assert abs(seg.length_m - expect_len) <= spacing + 1e-9, seg.length_m
    assert seg.road_id == "main-street"
    assert seg.timestamp == "2022-09-05T00:00:00Z"

    out_geojson = os.path.join(tmp, "flooded.geojson")
    fs.write_flooded_geojson(segments, geo.epsg, out_geojson)
    with open(out_geojson) as f:
        doc = json.load(f)
    assert doc["type"] == "FeatureCollection"
    assert doc["epsg"] == geo.epsg
    assert len(doc["features"]) == 1
    assert doc["features"][0]["properties"]["road_id"] == "main-street"

    # --- latency arithmetic ---------------------------------------------------
    runs = [0.3871, 0.4197, 0.3940, 0.4017, 0.3954]
    report = json.loads(fs.bench_report_from_runs(runs, batch_size=8))
    assert abs(report["mean_per_image_s"] * 1000 - 49.6) < 0.5
    assert abs(report["ms_per_sqkm"] - 33.5) <= 0.5
    assert report["chip_area_km2"] == 1.478656
    assert math.isclose(
        report["mean_per_image_s"], sum(runs) / len(runs) / 8, rel_tol=1e-12
    )

    print("floodsight python smoke test: all checks passed")


if __name__ == "__main__":
    main()
