//! `mitodet` command line: each pipeline stage as a subcommand plus an
//! end-to-end `run`.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use mitodet_core::detect::MockParams;
use mitodet_core::eval::{aggregate, evaluate_image};
use mitodet_core::fusion::{stitch, FusionConfig, TtaVariant};
use mitodet_core::geom::{Annotation, Detection, RoiSpec};
use mitodet_core::manifest::{balanced_batches, build_manifest, ManifestConfig, RoiTileSet, TileRecord};
use mitodet_core::pipeline::{run_pipeline, BackendSpec, PipelineConfig, PipelineError, RunOutput};
use mitodet_core::records::{
    read_jsonl, write_jsonl, AnnotationRecord, DetectionRecord,
};
use mitodet_core::stain::{build_bank, normalize, StainBank};
use mitodet_core::tiler::{plan_grid, TileGridConfig, TileSpec};

#[derive(Parser)]
#[command(
    name = "mitodet",
    version,
    about = "Mitotic-figure detection pipeline over histology ROIs: tiling, stain \
             normalization, tile inference with TTA, NMS + weighted box fusion, and \
             distance-matched evaluation"
)]
struct Cli {
    /// Root seed for every stochastic stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for tile-level stages (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long, default_value_t = 640)]
    tile_size: u32,
    #[arg(long, default_value_t = 480)]
    stride: u32,
}

#[derive(Subcommand)]
enum Command {
    /// Plan the overlapping tile grid for an ROI and write it as JSON.
    PlanTiles {
        #[arg(long)]
        roi_width: u32,
        #[arg(long)]
        roi_height: u32,
        #[command(flatten)]
        grid: GridArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit one stain profile per image in a directory and write the bank.
    FitStainBank {
        /// Directory of PNG/TIFF ROI images; file stems become ROI ids.
        #[arg(long)]
        images: PathBuf,
        /// Requested bank size; fewer than half surviving fits is an error.
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long, default_value_t = 0.25)]
        apply_probability: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stain-normalize an image to one profile of a bank.
    Normalize {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        /// Profile id (the source ROI id recorded in the bank).
        #[arg(long)]
        profile: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the detector on every tile and TTA variant; write raw detections.
    Infer {
        #[arg(long)]
        roi: PathBuf,
        /// ROI id for output records; defaults to the image file stem.
        #[arg(long)]
        roi_id: Option<String>,
        /// ONNX model file (requires the `onnx` build feature).
        #[arg(long, conflicts_with = "mock", required_unless_present = "mock")]
        model: Option<PathBuf>,
        /// Mock detector parameter file (JSON).
        #[arg(long)]
        mock: Option<PathBuf>,
        /// Ground-truth annotations feeding the mock detector.
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Stain bank for stochastic tile normalization.
        #[arg(long)]
        bank: Option<PathBuf>,
        #[command(flatten)]
        grid: GridArgs,
        /// Active TTA variants.
        #[arg(long, value_delimiter = ',', value_parser = parse_tta,
              default_values_t = TtaVariant::default_set())]
        tta: Vec<TtaVariant>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse raw per-(tile, variant) detections into ROI-level detections.
    Fuse {
        /// Raw detections (JSON lines with tile/tta provenance).
        #[arg(long)]
        dets: PathBuf,
        /// Grid file written by plan-tiles or run.
        #[arg(long)]
        grid: PathBuf,
        /// Fusion thresholds (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0.25)]
        min_confidence: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distance-matched evaluation of fused detections against ground truth.
    Evaluate {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Microns per pixel used to resolve the distance threshold.
        #[arg(long, default_value_t = 0.25)]
        mpp: f64,
        #[arg(long, default_value_t = 7.5)]
        dist_um: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the training manifest: annotated tiles plus background sample.
    MakeManifest {
        /// ROI descriptors, one JSON object per line.
        #[arg(long)]
        rois: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[command(flatten)]
        grid: GridArgs,
        #[arg(long, default_value_t = 80_000)]
        supplement: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit domain-balanced batches of tile ids from a manifest.
    SampleBatches {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 0.5)]
        fraction: f64,
        /// Batches to emit; defaults to one pass over the larger domain.
        #[arg(long)]
        num_batches: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// End-to-end: tile -> normalize -> infer -> fuse -> evaluate.
    Run {
        /// ROI image(s); repeat the flag to process several.
        #[arg(long, required = true, num_args = 1)]
        roi: Vec<PathBuf>,
        /// ROI id override (single --roi only); defaults to the file stem.
        #[arg(long)]
        roi_id: Option<String>,
        #[arg(long, conflicts_with = "mock", required_unless_present = "mock")]
        model: Option<PathBuf>,
        #[arg(long)]
        mock: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        bank: Option<PathBuf>,
        /// Pipeline configuration (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Also persist the grid and raw per-tile detections.
        #[arg(long)]
        keep_intermediate: bool,
    },
}

fn parse_tta(s: &str) -> Result<TtaVariant, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "identity" => Ok(TtaVariant::Identity),
        "hflip" => Ok(TtaVariant::HFlip),
        "vflip" => Ok(TtaVariant::VFlip),
        "hvflip" => Ok(TtaVariant::HVFlip),
        other => Err(format!(
            "unknown TTA variant {other:?} (expected identity, hflip, vflip or hvflip)"
        )),
    }
}

/// Grid file layout: the planned tiles plus the ROI and config they belong
/// to, so downstream stages can clip and remap without re-deriving them.
#[derive(Serialize, Deserialize)]
struct GridFile {
    roi: RoiSpec,
    config: TileGridConfig,
    tiles: Vec<TileSpec>,
}

fn io_err(context: &str, err: impl std::fmt::Display) -> PipelineError {
    PipelineError::Io(format!("{context}: {err}"))
}

fn config_err(context: &str, err: impl std::fmt::Display) -> PipelineError {
    PipelineError::Config(format!("{context}: {err}"))
}

fn load_rgb(path: &Path) -> Result<RgbImage, PipelineError> {
    let image = image::open(path).map_err(|e| io_err(&path.display().to_string(), e))?;
    Ok(image.to_rgb8())
}

fn read_to_string(path: &Path) -> Result<String, PipelineError> {
    fs::read_to_string(path).map_err(|e| io_err(&path.display().to_string(), e))
}

fn write_string(path: &Path, text: &str) -> Result<(), PipelineError> {
    fs::write(path, text).map_err(|e| io_err(&path.display().to_string(), e))
}

fn read_records<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let file = fs::File::open(path).map_err(|e| io_err(&path.display().to_string(), e))?;
    read_jsonl(BufReader::new(file)).map_err(|e| io_err(&path.display().to_string(), e))
}

fn write_records<T: Serialize>(path: &Path, records: &[T]) -> Result<(), PipelineError> {
    let mut buf = Vec::new();
    write_jsonl(&mut buf, records).map_err(|e| io_err(&path.display().to_string(), e))?;
    fs::write(path, buf).map_err(|e| io_err(&path.display().to_string(), e))
}

fn roi_id_or_stem(roi_id: Option<String>, path: &Path) -> String {
    roi_id.unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "roi".to_string())
    })
}

fn load_gt_for_roi(path: &Path, roi_id: &str) -> Result<Vec<Annotation>, PipelineError> {
    let records: Vec<AnnotationRecord> = read_records(path)?;
    Ok(records
        .iter()
        .filter(|r| r.roi_id == roi_id)
        .map(AnnotationRecord::to_annotation)
        .collect())
}

fn load_bank(path: &Path) -> Result<StainBank, PipelineError> {
    StainBank::from_json(&read_to_string(path)?)
        .map_err(|e| config_err(&path.display().to_string(), e))
}

fn load_mock_params(path: &Path) -> Result<MockParams, PipelineError> {
    serde_json::from_str(&read_to_string(path)?)
        .map_err(|e| config_err(&path.display().to_string(), e))
}

fn backend_spec(
    model: Option<PathBuf>,
    mock: Option<PathBuf>,
) -> Result<BackendSpec, PipelineError> {
    match (model, mock) {
        (Some(path), None) => Ok(BackendSpec::Onnx(path)),
        (None, Some(path)) => Ok(BackendSpec::Mock(load_mock_params(&path)?)),
        _ => Err(PipelineError::Config(
            "exactly one of --model or --mock is required".into(),
        )),
    }
}

fn raw_records(roi_id: &str, output: &RunOutput) -> Vec<DetectionRecord> {
    output
        .raw
        .values()
        .flatten()
        .map(|det| DetectionRecord::from_detection(roi_id, det))
        .collect()
}

fn run_cli(cli: Cli) -> Result<(), PipelineError> {
    let seed = cli.seed;
    let threads = cli.threads;
    match cli.command {
        Command::PlanTiles {
            roi_width,
            roi_height,
            grid,
            out,
        } => {
            let roi = RoiSpec::new("roi", roi_width, roi_height)
                .map_err(|e| config_err("roi", e))?;
            let config = TileGridConfig {
                tile_size: grid.tile_size,
                stride: grid.stride,
            };
            let tiles = plan_grid(&roi, &config).map_err(|e| config_err("grid", e))?;
            let file = GridFile { roi, config, tiles };
            write_string(&out, &serde_json::to_string_pretty(&file).unwrap())?;
            println!("planned {} tiles -> {}", file.tiles.len(), out.display());
            Ok(())
        }

        Command::FitStainBank {
            images,
            n,
            apply_probability,
            out,
        } => {
            let mut paths: Vec<PathBuf> = fs::read_dir(&images)
                .map_err(|e| io_err(&images.display().to_string(), e))?
                .filter_map(|entry| entry.ok().map(|e| e.path()))
                .filter(|p| {
                    matches!(
                        p.extension().and_then(|e| e.to_str()),
                        Some("png" | "tif" | "tiff")
                    )
                })
                .collect();
            paths.sort();
            let mut inputs = Vec::with_capacity(paths.len());
            for path in paths {
                let id = roi_id_or_stem(None, &path);
                inputs.push((id, load_rgb(&path)?));
            }
            let bank = build_bank(&inputs, n)
                .and_then(|b| b.with_apply_probability(apply_probability))
                .map_err(|e| config_err("stain bank", e))?;
            write_string(&out, &bank.to_json())?;
            println!(
                "fitted {} profiles from {} images -> {}",
                bank.profiles().len(),
                inputs.len(),
                out.display()
            );
            Ok(())
        }

        Command::Normalize {
            image,
            bank,
            profile,
            out,
        } => {
            let source = load_rgb(&image)?;
            let bank = load_bank(&bank)?;
            let target = bank.profile_by_id(&profile).ok_or_else(|| {
                PipelineError::Config(format!(
                    "profile {profile:?} not in bank (available: {})",
                    bank.profiles()
                        .iter()
                        .map(|p| p.source_roi())
                        .collect::<Vec<_>>()
                        .join(", ")
                ))
            })?;
            let normalized =
                normalize(&source, target).map_err(|e| config_err("normalize", e))?;
            normalized
                .save(&out)
                .map_err(|e| io_err(&out.display().to_string(), e))?;
            println!("normalized {} -> {}", image.display(), out.display());
            Ok(())
        }

        Command::Infer {
            roi,
            roi_id,
            model,
            mock,
            gt,
            bank,
            grid,
            tta,
            out,
        } => {
            let roi_id = roi_id_or_stem(roi_id, &roi);
            let image = load_rgb(&roi)?;
            let spec = RoiSpec::new(&roi_id, image.width(), image.height())
                .map_err(|e| config_err("roi", e))?;
            let backend = backend_spec(model, mock)?;
            let annotations = gt
                .as_deref()
                .map(|p| load_gt_for_roi(p, &roi_id))
                .transpose()?;
            let bank = bank.as_deref().map(load_bank).transpose()?;
            let cfg = PipelineConfig {
                tile_size: grid.tile_size,
                stride: grid.stride,
                tta,
                seed: seed.unwrap_or(0),
                stain_apply_probability: bank
                    .as_ref()
                    .map(|b| b.apply_probability())
                    .unwrap_or(0.0),
                ..PipelineConfig::default()
            };
            let output = run_pipeline(
                &image,
                &spec,
                annotations.as_deref(),
                &cfg,
                &backend,
                bank.as_ref(),
                threads,
            )?;
            let records = raw_records(&roi_id, &output);
            write_records(&out, &records)?;
            println!("{} raw detections -> {}", records.len(), out.display());
            Ok(())
        }

        Command::Fuse {
            dets,
            grid,
            config,
            min_confidence,
            out,
        } => {
            let grid_file: GridFile = serde_json::from_str(&read_to_string(&grid)?)
                .map_err(|e| io_err(&grid.display().to_string(), e))?;
            let fusion_cfg: FusionConfig = match config {
                Some(path) => serde_json::from_str(&read_to_string(&path)?)
                    .map_err(|e| config_err(&path.display().to_string(), e))?,
                None => FusionConfig::default(),
            };
            let records: Vec<DetectionRecord> = read_records(&dets)?;
            let mut per_tile: BTreeMap<(usize, TtaVariant), Vec<Detection>> = BTreeMap::new();
            for (idx, record) in records.iter().enumerate() {
                let (Some(tile), Some(tta)) = (record.tile, record.tta) else {
                    return Err(PipelineError::Io(format!(
                        "{}: line {}: raw detections must carry tile and tta fields",
                        dets.display(),
                        idx + 1
                    )));
                };
                let det = record
                    .to_detection()
                    .map_err(|e| io_err(&dets.display().to_string(), e))?;
                per_tile.entry((tile, tta)).or_default().push(det);
            }
            let fused = stitch(
                &per_tile,
                &grid_file.tiles,
                &grid_file.roi,
                &fusion_cfg,
                min_confidence,
            )
            .map_err(|e| config_err("fuse", e))?;
            let roi_id = &grid_file.roi.id;
            let out_records: Vec<DetectionRecord> = fused
                .iter()
                .map(|d| {
                    // Fused detections aggregate several sources; drop the
                    // per-tile provenance from the final records.
                    let mut rec = DetectionRecord::from_detection(roi_id, d);
                    rec.tile = None;
                    rec.tta = None;
                    rec
                })
                .collect();
            write_records(&out, &out_records)?;
            println!("{} fused detections -> {}", out_records.len(), out.display());
            Ok(())
        }

        Command::Evaluate {
            preds,
            gt,
            mpp,
            dist_um,
            out,
        } => {
            if mpp.is_nan() || mpp <= 0.0 || dist_um.is_nan() || dist_um <= 0.0 {
                return Err(PipelineError::Config(
                    "mpp and dist-um must be positive".into(),
                ));
            }
            let pred_records: Vec<DetectionRecord> = read_records(&preds)?;
            let gt_records: Vec<AnnotationRecord> = read_records(&gt)?;
            let mut by_roi: BTreeMap<String, (Vec<Detection>, Vec<Annotation>)> = BTreeMap::new();
            for record in &pred_records {
                let det = record
                    .to_detection()
                    .map_err(|e| io_err(&preds.display().to_string(), e))?;
                by_roi.entry(record.roi_id.clone()).or_default().0.push(det);
            }
            for record in &gt_records {
                by_roi
                    .entry(record.roi_id.clone())
                    .or_default()
                    .1
                    .push(record.to_annotation());
            }
            let threshold_px = dist_um / mpp;
            let per_image: Vec<_> = by_roi
                .iter()
                .map(|(roi_id, (preds, gts))| evaluate_image(roi_id, preds, gts, threshold_px))
                .collect();
            let report = aggregate(per_image).map_err(|e| config_err("evaluate", e))?;
            write_string(&out, &serde_json::to_string_pretty(&report).unwrap())?;
            println!(
                "{} images: mean F1 {:.4}, pooled F1 {:.4} -> {}",
                report.per_image.len(),
                report.mean_f1,
                report.pooled_f1,
                out.display()
            );
            Ok(())
        }

        Command::MakeManifest {
            rois,
            gt,
            grid,
            supplement,
            out,
        } => {
            let roi_specs: Vec<RoiSpec> = read_records(&rois)?;
            let gt_records: Vec<AnnotationRecord> = read_records(&gt)?;
            let tile_cfg = TileGridConfig {
                tile_size: grid.tile_size,
                stride: grid.stride,
            };
            let mut sets = Vec::with_capacity(roi_specs.len());
            for roi in roi_specs {
                let tiles = plan_grid(&roi, &tile_cfg).map_err(|e| config_err("grid", e))?;
                let annotations = gt_records
                    .iter()
                    .filter(|r| r.roi_id == roi.id)
                    .map(AnnotationRecord::to_annotation)
                    .collect();
                sets.push(RoiTileSet {
                    roi,
                    grid: tiles,
                    annotations,
                });
            }
            let cfg = ManifestConfig {
                background_supplement: supplement,
                seed: seed.unwrap_or(0),
                ..ManifestConfig::default()
            };
            let (records, summary) =
                build_manifest(&sets, &cfg).map_err(|e| config_err("manifest", e))?;
            write_records(&out, &records)?;
            println!(
                "{} tiles ({} annotated human, {} annotated canine, {} background) -> {}",
                records.len(),
                summary.annotated_human,
                summary.annotated_canine,
                summary.background_human + summary.background_canine,
                out.display()
            );
            Ok(())
        }

        Command::SampleBatches {
            manifest,
            batch,
            fraction,
            num_batches,
            out,
        } => {
            let records: Vec<TileRecord> = read_records(&manifest)?;
            let cfg = ManifestConfig {
                batch_size: batch,
                human_fraction: fraction,
                seed: seed.unwrap_or(0),
                ..ManifestConfig::default()
            };
            let sampler =
                balanced_batches(&records, &cfg).map_err(|e| config_err("sampler", e))?;
            let count = num_batches.unwrap_or_else(|| sampler.epoch_batches());
            let batches: Vec<Vec<String>> = sampler.take(count).collect();
            write_records(&out, &batches)?;
            println!("{} batches of {} -> {}", batches.len(), batch, out.display());
            Ok(())
        }

        Command::Run {
            roi,
            roi_id,
            model,
            mock,
            gt,
            bank,
            config,
            out_dir,
            keep_intermediate,
        } => {
            if roi.len() > 1 && roi_id.is_some() {
                return Err(PipelineError::Config(
                    "--roi-id applies only when a single --roi is given".into(),
                ));
            }
            let mut cfg: PipelineConfig = match config {
                Some(path) => serde_json::from_str(&read_to_string(&path)?)
                    .map_err(|e| config_err(&path.display().to_string(), e))?,
                None => PipelineConfig::default(),
            };
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let mock_params = mock.as_deref().map(load_mock_params).transpose()?;
            let backend = match (model, mock_params) {
                (Some(path), None) => BackendSpec::Onnx(path),
                (None, Some(params)) => BackendSpec::Mock(params),
                _ => {
                    return Err(PipelineError::Config(
                        "exactly one of --model or --mock is required".into(),
                    ))
                }
            };
            let bank = bank.as_deref().map(load_bank).transpose()?;

            let mut fused_records: Vec<DetectionRecord> = Vec::new();
            let mut per_image = Vec::new();
            let mut intermediates: Vec<(String, GridFile, Vec<DetectionRecord>)> = Vec::new();
            let mut fused_total = 0usize;
            for path in &roi {
                let id = roi_id_or_stem(roi_id.clone(), path);
                let image = load_rgb(path)?;
                let spec = RoiSpec::new(&id, image.width(), image.height())
                    .map_err(|e| config_err("roi", e))?
                    .with_mpp(cfg.mpp)
                    .map_err(|e| config_err("roi", e))?;
                let annotations = gt
                    .as_deref()
                    .map(|p| load_gt_for_roi(p, &id))
                    .transpose()?;
                let output = run_pipeline(
                    &image,
                    &spec,
                    annotations.as_deref(),
                    &cfg,
                    &backend,
                    bank.as_ref(),
                    threads,
                )?;
                fused_total += output.fused.len();
                fused_records.extend(output.fused.iter().map(|d| {
                    let mut rec = DetectionRecord::from_detection(&id, d);
                    rec.tile = None;
                    rec.tta = None;
                    rec
                }));
                if keep_intermediate {
                    let grid_file = GridFile {
                        roi: spec.clone(),
                        config: cfg.tile_config(),
                        tiles: output.grid.clone(),
                    };
                    intermediates.push((id.clone(), grid_file, raw_records(&id, &output)));
                }
                if let Some(report) = output.report {
                    per_image.extend(report.per_image);
                }
            }
            let report = if gt.is_some() {
                Some(aggregate(per_image).map_err(|e| config_err("evaluate", e))?)
            } else {
                None
            };

            // All stages succeeded; only now touch the filesystem.
            fs::create_dir_all(&out_dir)
                .map_err(|e| io_err(&out_dir.display().to_string(), e))?;
            write_records(&out_dir.join("fused.jsonl"), &fused_records)?;
            write_string(
                &out_dir.join("resolved_config.json"),
                &serde_json::to_string_pretty(&cfg).unwrap(),
            )?;
            if let Some(report) = &report {
                write_string(
                    &out_dir.join("report.json"),
                    &serde_json::to_string_pretty(report).unwrap(),
                )?;
            }
            let single = intermediates.len() == 1;
            for (id, grid_file, raw) in &intermediates {
                let (grid_name, raw_name) = if single {
                    ("grid.json".to_string(), "raw.jsonl".to_string())
                } else {
                    (format!("grid.{id}.json"), format!("raw.{id}.jsonl"))
                };
                write_string(
                    &out_dir.join(grid_name),
                    &serde_json::to_string_pretty(grid_file).unwrap(),
                )?;
                write_records(&out_dir.join(raw_name), raw)?;
            }
            println!(
                "{} ROI(s), {} fused detections{} -> {}",
                roi.len(),
                fused_total,
                report
                    .as_ref()
                    .map(|r| format!(", pooled F1 {:.4}", r.pooled_f1))
                    .unwrap_or_default(),
                out_dir.display()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run_cli(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
