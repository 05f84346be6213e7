use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use floodsight_core::bench::{bench_infer, BenchOptions};
use floodsight_core::error::{Error, Result};
use floodsight_core::modelopt::container::{load_model, save_model, save_quantized, Encoding};
use floodsight_core::modelopt::{prune_finetune, quantize_params, size_report, PruneSchedule};
use floodsight_core::pipeline::{
    run_pipeline, stage_chip_raster, stage_chip_tiles, stage_infer, stage_simulate, stage_synth,
    ChipLabels, InferModel, PipelineConfig, TileSetIndex,
};
use floodsight_core::raster::{load_mask, load_raster};
use floodsight_core::render::render_overlay;
use floodsight_core::roads::{intersect, load_roads, write_flooded_geojson, IntersectOptions};
use floodsight_core::segnet::train::{load_dataset, train, TrainConfig};
use floodsight_core::segnet::ModelConfig;
use floodsight_core::sim::SimConfig;
use floodsight_core::water::{area_hectares, Chip, ChipManifest, ChipSource, SceneSpec};

#[derive(Parser)]
#[command(
    name = "floodsight",
    about = "Road-flood detection pipeline: sensor simulation, water segmentation, model compression, road intersection, and latency accounting",
    version
)]
struct Cli {
    /// Override every stage seed in configs.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for parallel sections (results are identical for any
    /// thread count).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    /// Pipeline configuration JSON (used by `run`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene and its ground-truth water mask.
    Synth {
        /// SceneSpec JSON file.
        #[arg(long)]
        scene: PathBuf,
        /// Output directory (writes scene.* and truth.*).
        #[arg(long, default_value = "out/scene")]
        out_dir: PathBuf,
    },
    /// Simulate the sensor product from a raster bundle: resample, misalign
    /// bands, PSF, reflectance, tile.
    Simulate {
        /// Input raster bundle stem.
        #[arg(long)]
        input: PathBuf,
        /// SimConfig JSON file (defaults apply when omitted).
        #[arg(long)]
        sim_config: Option<PathBuf>,
        #[arg(long, default_value = "out/sim")]
        out_dir: PathBuf,
    },
    /// Cut 256x256 chips and label masks from tiles or a single raster.
    Chip {
        /// tiles.json from `simulate`.
        #[arg(long, conflicts_with = "input")]
        tiles: Option<PathBuf>,
        /// Single raster bundle stem (alternative to --tiles).
        #[arg(long)]
        input: Option<PathBuf>,
        /// NDWI threshold for labels.
        #[arg(long, default_value_t = 0.01)]
        threshold: f64,
        /// Ground-truth mask bundle stem to use as labels instead of the
        /// NDWI threshold (must cover the full product grid).
        #[arg(long)]
        label_mask: Option<PathBuf>,
        #[arg(long, default_value = "out/chips")]
        out_dir: PathBuf,
    },
    /// Train the segmentation model on a chip manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// ModelConfig JSON (defaults: levels 3, base 8, in 4).
        #[arg(long)]
        model_config: Option<PathBuf>,
        /// TrainConfig JSON (defaults: lr 0.001, 100 epochs, batch 8).
        #[arg(long)]
        train_config: Option<PathBuf>,
        /// Output model file.
        #[arg(long, default_value = "out/model.rfpm")]
        out: PathBuf,
        /// Training report JSON.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Training report CSV.
        #[arg(long)]
        report_csv: Option<PathBuf>,
    },
    /// Prune a trained model with the polynomial sparsity schedule and
    /// fine-tune it.
    Prune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// PruneSchedule JSON (defaults: 0.2 -> 0.8 over steps 0..5000).
        #[arg(long)]
        schedule: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        epochs: usize,
        #[arg(long)]
        train_config: Option<PathBuf>,
        /// Output model file (sparse encoding).
        #[arg(long, default_value = "out/pruned.rfpm")]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Post-training int8 quantization of a model file.
    Quantize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "out/quantized.rfpm")]
        out: PathBuf,
    },
    /// Run water-mask inference over a chip manifest and reassemble the
    /// full-product mask.
    Infer {
        #[arg(long)]
        manifest: PathBuf,
        /// Model file; omit to use the NDWI-threshold baseline.
        #[arg(long, conflicts_with = "baseline")]
        model: Option<PathBuf>,
        /// Use the NDWI-threshold baseline.
        #[arg(long)]
        baseline: bool,
        /// Probability threshold for the model path, NDWI threshold for the
        /// baseline.
        #[arg(long)]
        threshold: Option<f64>,
        /// tiles.json describing the product grid (canvas geometry).
        #[arg(long, conflicts_with = "like")]
        tiles: Option<PathBuf>,
        /// Raster bundle stem whose grid defines the canvas (alternative to
        /// --tiles).
        #[arg(long)]
        like: Option<PathBuf>,
        /// Output mask bundle stem.
        #[arg(long, default_value = "out/water_mask")]
        out_mask: PathBuf,
    },
    /// Intersect a water mask with a road network and write flooded
    /// segments as GeoJSON.
    Intersect {
        /// Water mask bundle stem.
        #[arg(long)]
        mask: PathBuf,
        /// Roads GeoJSON (LineString / MultiLineString features).
        #[arg(long)]
        roads: PathBuf,
        #[arg(long)]
        sample_spacing_m: Option<f64>,
        #[arg(long)]
        min_run_m: Option<f64>,
        /// Timestamp attached to every segment (ISO-8601).
        #[arg(long, default_value = "1970-01-01T00:00:00Z")]
        timestamp: String,
        /// Meters per CRS unit (required for geographic inputs).
        #[arg(long)]
        meters_per_unit: Option<f64>,
        #[arg(long, default_value = "out/flooded.geojson")]
        out: PathBuf,
    },
    /// Time model inference over one batch of chips.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 5)]
        runs: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        /// Report JSON path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Byte accounting of a model file across encodings.
    ReportSize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a PNG overlay of raster, mask, roads, and flooded segments.
    Render {
        #[arg(long)]
        raster: Option<PathBuf>,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        roads: Option<PathBuf>,
        /// Flooded-segments GeoJSON (drawn in red).
        #[arg(long)]
        flooded: Option<PathBuf>,
        #[arg(long, default_value = "out/overlay.png")]
        out: PathBuf,
    },
    /// Run the full pipeline from --config: synth, simulate, chip, infer,
    /// intersect.
    Run,
}

fn load_json_or_default<T: serde::de::DeserializeOwned + Default>(
    path: &Option<PathBuf>,
) -> Result<T> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::json(p, e))
        }
        None => Ok(T::default()),
    }
}

fn manifest_chips(manifest_path: &PathBuf) -> Result<Vec<Chip>> {
    let manifest = ChipManifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(std::path::Path::new("."));
    manifest
        .chips
        .iter()
        .map(|entry| {
            let raster = load_raster(&base.join(&entry.chip))?;
            Chip::from_raster(
                &raster,
                ChipSource {
                    tile_id: entry.tile_id.clone(),
                    col_off: entry.col_off,
                    row_off: entry.row_off,
                },
            )
        })
        .collect()
}

fn write_json<T: serde::Serialize>(value: &T, out: &Option<PathBuf>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::InvalidConfig(format!("serialize report: {e}")))?;
    match out {
        Some(path) => {
            if let Some(parent) = path.parent() {
                if !parent.as_os_str().is_empty() {
                    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                }
            }
            fs::write(path, text).map_err(|e| Error::io(path, e))
        }
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::Synth { scene, out_dir } => {
            let text = fs::read_to_string(&scene).map_err(|e| Error::io(&scene, e))?;
            let mut spec: SceneSpec =
                serde_json::from_str(&text).map_err(|e| Error::json(&scene, e))?;
            if let Some(seed) = cli.seed {
                spec.seed = seed;
            }
            let (scene_stem, truth_stem) = stage_synth(&spec, &out_dir)?;
            eprintln!(
                "scene -> {}, truth -> {}",
                scene_stem.display(),
                truth_stem.display()
            );
            Ok(())
        }
        Command::Simulate {
            input,
            sim_config,
            out_dir,
        } => {
            let mut cfg: SimConfig = load_json_or_default(&sim_config)?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let (index_path, report) = stage_simulate(&input, &cfg, &out_dir)?;
            eprintln!(
                "tiles -> {} (band-to-band RMSE {:.2} m)",
                index_path.display(),
                report.rmse_m
            );
            Ok(())
        }
        Command::Chip {
            tiles,
            input,
            threshold,
            label_mask,
            out_dir,
        } => {
            let truth = match &label_mask {
                Some(stem) => Some(load_mask(stem)?),
                None => None,
            };
            let labels = match &truth {
                Some(mask) => ChipLabels::Mask(mask),
                None => ChipLabels::NdwiThreshold(threshold),
            };
            let manifest = match (tiles, input) {
                (Some(index), None) => stage_chip_tiles(&index, labels, &out_dir)?,
                (None, Some(stem)) => stage_chip_raster(&stem, labels, &out_dir)?,
                _ => {
                    return Err(Error::InvalidConfig(
                        "chip needs exactly one of --tiles or --input".into(),
                    ))
                }
            };
            let count = ChipManifest::load(&manifest)?.chips.len();
            eprintln!("{count} chips -> {}", manifest.display());
            Ok(())
        }
        Command::Train {
            manifest,
            model_config,
            train_config,
            out,
            report,
            report_csv,
        } => {
            let model_cfg: ModelConfig = load_json_or_default(&model_config)?;
            let mut train_cfg: TrainConfig = load_json_or_default(&train_config)?;
            if let Some(seed) = cli.seed {
                train_cfg.seed = seed;
            }
            let dataset = load_dataset(&manifest)?;
            let (params, train_report) = train(&dataset, &model_cfg, &train_cfg)?;
            save_model(&model_cfg, &params, &out, Encoding::F32)?;
            if let Some(path) = report {
                train_report.save_json(&path)?;
            }
            if let Some(path) = report_csv {
                train_report.save_csv(&path)?;
            }
            if let Some(last) = train_report.epochs.last() {
                eprintln!(
                    "trained {} epochs, final train dice {:.4} -> {}",
                    train_report.epochs.len(),
                    last.train.dice,
                    out.display()
                );
            }
            Ok(())
        }
        Command::Prune {
            model,
            manifest,
            schedule,
            epochs,
            train_config,
            out,
            report,
        } => {
            let file = load_model(&model)?;
            let mut params = file.dense_params()?;
            let sched: PruneSchedule = load_json_or_default(&schedule)?;
            let mut train_cfg: TrainConfig = load_json_or_default(&train_config)?;
            if let Some(seed) = cli.seed {
                train_cfg.seed = seed;
            }
            let dataset = load_dataset(&manifest)?;
            let prune_report =
                prune_finetune(&mut params, &dataset, &sched, epochs, &file.config, &train_cfg)?;
            save_model(&file.config, &params, &out, Encoding::Sparse)?;
            if let Some(path) = report {
                prune_report.save_json(&path)?;
            }
            let sizes = size_report(&params);
            eprintln!(
                "pruned model sparsity {:.3} -> {}",
                sizes.overall_sparsity,
                out.display()
            );
            Ok(())
        }
        Command::Quantize { model, out } => {
            let file = load_model(&model)?;
            let params = file.dense_params()?;
            let q = quantize_params(&params)?;
            save_quantized(&file.config, &q, &out)?;
            eprintln!("quantized model -> {}", out.display());
            Ok(())
        }
        Command::Infer {
            manifest,
            model,
            baseline,
            threshold,
            tiles,
            like,
            out_mask,
        } => {
            let canvas = match (tiles, like) {
                (Some(index_path), None) => {
                    let index = TileSetIndex::load(&index_path)?;
                    (index.product_width, index.product_height, index.geo)
                }
                (None, Some(stem)) => {
                    let r = load_raster(&stem)?;
                    (r.width(), r.height(), r.geo)
                }
                _ => {
                    return Err(Error::InvalidConfig(
                        "infer needs exactly one of --tiles or --like".into(),
                    ))
                }
            };
            let model = match (model, baseline) {
                (Some(path), false) => InferModel::File {
                    path,
                    threshold: threshold.unwrap_or(0.5),
                },
                (None, _) => InferModel::Baseline {
                    threshold: threshold.unwrap_or(0.01),
                },
                (Some(_), true) => unreachable!("clap conflicts_with"),
            };
            let mask = stage_infer(&manifest, &model, canvas, &out_mask)?;
            let area = area_hectares(&mask, mask.geo.pixel_size_x)?;
            eprintln!(
                "water mask -> {} ({:.2} ha of surface water)",
                out_mask.display(),
                area
            );
            Ok(())
        }
        Command::Intersect {
            mask,
            roads,
            sample_spacing_m,
            min_run_m,
            timestamp,
            meters_per_unit,
            out,
        } => {
            let mask = load_mask(&mask)?;
            let network = load_roads(&roads)?;
            let opts = IntersectOptions {
                sample_spacing_m,
                min_run_m,
                timestamp,
                meters_per_unit,
            };
            let segments = intersect(&mask, &network, &opts)?;
            write_flooded_geojson(&segments, mask.geo.epsg, &out)?;
            eprintln!("{} flooded segments -> {}", segments.len(), out.display());
            Ok(())
        }
        Command::Bench {
            model,
            manifest,
            batch,
            runs,
            warmup,
            out,
        } => {
            let file = load_model(&model)?;
            let params = file.dense_params()?;
            let chips = manifest_chips(&manifest)?;
            let report = bench_infer(
                &params,
                &file.config,
                &chips,
                &BenchOptions {
                    batch,
                    runs,
                    warmup,
                },
            )?;
            eprintln!(
                "mean per image {:.1} ms, {:.1} ms per km^2",
                report.mean_per_image_s * 1000.0,
                report.ms_per_sqkm
            );
            write_json(&report, &out)
        }
        Command::ReportSize { model, out } => {
            let file = load_model(&model)?;
            let params = file.dense_params()?;
            write_json(&size_report(&params), &out)
        }
        Command::Render {
            raster,
            mask,
            roads,
            flooded,
            out,
        } => {
            let raster = match &raster {
                Some(stem) => Some(load_raster(stem)?),
                None => None,
            };
            let mask = match &mask {
                Some(stem) => Some(load_mask(stem)?),
                None => None,
            };
            let roads = match &roads {
                Some(path) => Some(load_roads(path)?),
                None => None,
            };
            let flooded_net = match &flooded {
                Some(path) => Some(load_roads(path)?),
                None => None,
            };
            // draw the flooded geometry directly from its polylines
            let segments: Option<Vec<floodsight_core::roads::FloodedSegment>> =
                flooded_net.map(|net| {
                    net.features
                        .into_iter()
                        .flat_map(|f| {
                            f.polylines.into_iter().map(move |line| {
                                floodsight_core::roads::FloodedSegment {
                                    road_id: f.road_id.clone(),
                                    start: line[0],
                                    end: *line.last().expect("validated >= 2 vertices"),
                                    length_m: 0.0,
                                    sample_count: line.len(),
                                    timestamp: String::new(),
                                    samples: line,
                                }
                            })
                        })
                        .collect()
                });
            if let Some(parent) = out.parent() {
                if !parent.as_os_str().is_empty() {
                    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                }
            }
            render_overlay(
                raster.as_ref(),
                mask.as_ref(),
                roads.as_ref(),
                segments.as_deref(),
                &out,
            )?;
            eprintln!("overlay -> {}", out.display());
            Ok(())
        }
        Command::Run => {
            let config_path = cli.config.ok_or_else(|| {
                Error::InvalidConfig("run requires --config <pipeline.json>".into())
            })?;
            let mut cfg = PipelineConfig::load(&config_path)?;
            if cli.seed.is_some() {
                cfg.seed = cli.seed;
            }
            let summary = run_pipeline(&cfg)?;
            eprintln!(
                "pipeline complete: {} chips, {:.2} ha water, {} flooded segments -> {}",
                summary.chip_count,
                summary.water_area_ha,
                summary.flooded_segments,
                cfg.out_dir.display()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 1 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
        {
            eprintln!("warning: could not size thread pool: {e}");
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
