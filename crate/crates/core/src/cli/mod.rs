//! The `rgbd` command-line tool.
//!
//! Exit codes: 0 on success, 2 for usage or input validation errors, 1 for
//! failures while running a stage. Logs go to stderr; data goes to files or stdout.

pub mod config;
pub mod overlay;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::calib::load_calibration;
use crate::dataset::{
    class_balance, generate_fixture_dataset, load_coco, split_dataset, ClassCatalog, DatasetSplit, SceneConfig,
};
use crate::depth::DepthStats;
use crate::detect::{load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::evaluate::{aggregate_runs, comparison_report, write_coco_results, CocoResult, EvalReport, RunAggregate, RunMetrics};
use crate::evaluate::{evaluate_split, read_coco_results};
use crate::fusion::VariantKind;
use crate::pipeline::{self, PipelineError, CHANNEL_STATS_FILE, DEPTH_STATS_FILE};
use crate::train::{predict_all, run_repeated};
use config::{read_config_file, PipelineConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Pipeline(e) if e.is_validation() => 2,
            CliError::Pipeline(_) | CliError::Runtime(_) => 1,
        }
    }
}

macro_rules! impl_from_stage_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Pipeline(e.into())
            }
        }
    )*};
}

impl_from_stage_error!(
    crate::calib::CalibError,
    crate::depth::DepthError,
    crate::fusion::FusionError,
    crate::dataset::DatasetError,
    crate::detect::DetectError,
    crate::train::TrainError,
    crate::evaluate::EvalError
);

#[derive(Debug, Parser)]
#[command(name = "rgbd", version, about = "Calibrated RGB-D early fusion: data preparation, training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    Default,
    LowContrast,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ReportFormat {
    Markdown,
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Project point clouds into 16-bit millimeter depth maps and write depth statistics.
    Project {
        #[arg(long)]
        calib: PathBuf,
        /// Directory of `.xyz` / `.xyzb` clouds.
        #[arg(long)]
        clouds: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scale depth maps to 8 bits and stack them under the RGB images as 4-channel PNGs.
    Pack {
        #[arg(long)]
        rgb: PathBuf,
        #[arg(long)]
        depth: PathBuf,
        /// Defaults to `<depth>/depth_stats.json`.
        #[arg(long)]
        stats: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic fixture dataset (RGB, clouds, COCO annotations, manifest, calibration).
    Synth {
        /// Scene configuration (TOML or JSON); overrides --preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "default")]
        preset: Preset,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a COCO dataset into train/val/test image ids.
    Split {
        #[arg(long)]
        coco: PathBuf,
        /// Comma-separated train,val,test counts.
        #[arg(long, default_value = "226,45,30")]
        counts: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Split manifest path; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one or all variants, several seeded runs each, and score every run on the test split.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// rgb, depth, rgbd or all.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        dataset_root: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        patience: Option<usize>,
        #[arg(long)]
        downscale: Option<u32>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset_root: Option<PathBuf>,
        /// Report path; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write detections in COCO results format.
        #[arg(long)]
        detections_out: Option<PathBuf>,
    },
    /// Aggregate test reports of repeated runs and compare the variants.
    Report {
        /// Directory with `<variant>/run_*/test_report.json`.
        #[arg(long)]
        runs_dir: PathBuf,
        #[arg(long, value_enum, default_value = "markdown")]
        format: ReportFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw detections onto an image.
    Overlay {
        #[arg(long)]
        image: PathBuf,
        /// Detections in COCO results format.
        #[arg(long)]
        detections: PathBuf,
        /// Only draw detections of this image id.
        #[arg(long)]
        image_id: Option<u64>,
        #[arg(long, default_value_t = 0.5)]
        score_threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Project { calib, clouds, out } => cmd_project(&calib, &clouds, &out),
        Command::Pack { rgb, depth, stats, out } => {
            let stats = stats.unwrap_or_else(|| depth.join(DEPTH_STATS_FILE));
            cmd_pack(&rgb, &depth, &stats, &out)
        }
        Command::Synth { config, preset, seed, n, out } => cmd_synth(config.as_deref(), preset, seed, n, &out),
        Command::Split { coco, counts, seed, out } => cmd_split(&coco, &counts, seed, out.as_deref()),
        Command::Train { config, variant, runs, seed, dataset_root, out, max_epochs, patience, downscale } => {
            let mut cfg = PipelineConfig::load(config.as_deref())?;
            if let Some(v) = variant {
                cfg.variant = v;
            }
            if let Some(r) = runs {
                cfg.runs = r;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(d) = dataset_root {
                cfg.paths.dataset_root = Some(d);
            }
            if let Some(o) = out {
                cfg.paths.output_root = Some(o);
            }
            if let Some(m) = max_epochs {
                cfg.train.max_epochs = m;
            }
            if let Some(p) = patience {
                cfg.train.patience_epochs = p;
            }
            if let Some(d) = downscale {
                cfg.input_downscale = d;
            }
            cmd_train(&cfg)
        }
        Command::Eval { checkpoint, split, config, dataset_root, out, detections_out } => {
            let mut cfg = PipelineConfig::load(config.as_deref())?;
            if let Some(d) = dataset_root {
                cfg.paths.dataset_root = Some(d);
            }
            let report = cmd_eval(&cfg, &checkpoint, &split, detections_out.as_deref())?;
            emit(&serde_json::to_string_pretty(&report).expect("report serializes"), out.as_deref())
        }
        Command::Report { runs_dir, format, out } => cmd_report(&runs_dir, format, out.as_deref()),
        Command::Overlay { image, detections, image_id, score_threshold, out } => {
            cmd_overlay(&image, &detections, image_id, score_threshold, &out)
        }
    }
}

fn require_dir(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} directory {} does not exist", path.display())))
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} file {} does not exist", path.display())))
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", parent.display())))?;
    }
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn emit(text: &str, out: Option<&Path>) -> Result<(), CliError> {
    match out {
        Some(p) => write_file(p, text),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

pub fn cmd_project(calib: &Path, clouds: &Path, out: &Path) -> Result<(), CliError> {
    require_file(calib, "calibration")?;
    require_dir(clouds, "cloud")?;
    let bundle = load_calibration(calib)?;
    let stats = pipeline::project_clouds(&bundle, clouds, out)?;
    log::info!("depth range {:.4}..{:.4} m over {} valid pixels", stats.d_min, stats.d_max, stats.valid_pixel_count);
    Ok(())
}

pub fn cmd_pack(rgb: &Path, depth: &Path, stats: &Path, out: &Path) -> Result<(), CliError> {
    require_dir(rgb, "RGB")?;
    require_dir(depth, "depth")?;
    require_file(stats, "depth statistics")?;
    let stats = DepthStats::load(stats)?;
    pipeline::pack_directory(rgb, depth, &stats, out)?;
    Ok(())
}

pub fn cmd_synth(config: Option<&Path>, preset: Preset, seed: u64, n: usize, out: &Path) -> Result<(), CliError> {
    let scene: SceneConfig = match (config, preset) {
        (Some(p), _) => read_config_file(p)?,
        (None, Preset::Default) => SceneConfig::default(),
        (None, Preset::LowContrast) => SceneConfig::low_contrast(),
    };
    let dataset = generate_fixture_dataset(&scene, seed, n, out)?;
    log::info!("generated {} scenes with {} annotations in {}", n, dataset.annotation_count(), out.display());
    Ok(())
}

fn parse_counts(text: &str) -> Result<(usize, usize, usize), CliError> {
    let parts: Vec<usize> = text
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("counts must be three comma-separated integers, got {text:?}")))?;
    match parts.as_slice() {
        [a, b, c] => Ok((*a, *b, *c)),
        _ => Err(CliError::Usage(format!("counts must be three comma-separated integers, got {text:?}"))),
    }
}

pub fn cmd_split(coco: &Path, counts: &str, seed: u64, out: Option<&Path>) -> Result<(), CliError> {
    let counts = parse_counts(counts)?;
    require_file(coco, "COCO")?;
    let root = coco.parent().unwrap_or(Path::new("."));
    let dataset = load_coco(coco, root)?;
    let split = split_dataset(&dataset, counts, seed)?;
    let balance = class_balance(&dataset);
    log::info!("class counts {:?}, min/max ratio {:?}", balance.counts, balance.min_max_ratio);
    emit(&serde_json::to_string_pretty(&split).expect("split serializes"), out)
}

/// Per-variant output folder.
pub fn variant_dir(output_root: &Path, variant: VariantKind) -> PathBuf {
    output_root.join(variant.short_name())
}

pub fn run_dir(output_root: &Path, variant: VariantKind, run_index: usize) -> PathBuf {
    variant_dir(output_root, variant).join(format!("run_{run_index:02}"))
}

pub const CHECKPOINT_FILE: &str = "checkpoint.rgbdckpt";
pub const TEST_REPORT_FILE: &str = "test_report.json";

#[derive(serde::Serialize)]
struct VariantSummary {
    variant: VariantKind,
    runs: Vec<RunMetrics>,
    aggregate: RunAggregate,
}

pub fn cmd_train(cfg: &PipelineConfig) -> Result<(), CliError> {
    cfg.validate_for_dataset()?;
    let out = cfg.output_root()?;
    let media_root = cfg.media_root()?;
    let dataset = load_coco(&cfg.coco_path()?, &media_root)?;
    let split = DatasetSplit::load(&cfg.split_path()?)?;
    let train_cfg = crate::train::TrainConfig { seed: cfg.seed, ..cfg.train.clone() };
    for variant in cfg.variants()? {
        let vdir = variant_dir(&out, variant);
        fs::create_dir_all(&vdir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", vdir.display())))?;
        let (data, stats) = pipeline::prepare_splits(&dataset, &split, variant, cfg.input_downscale)?;
        let stats_path = vdir.join(CHANNEL_STATS_FILE);
        stats.save(&stats_path)?;
        log::info!(
            "training {} ({} runs): {} train / {} val / {} test images",
            variant.display_name(),
            cfg.runs,
            data.train.len(),
            data.val.len(),
            data.test.len()
        );
        let outcomes = run_repeated(variant, &data, &cfg.arch, &train_cfg, &cfg.predict, &cfg.eval, cfg.runs)?;
        let mut metrics = Vec::new();
        for o in &outcomes {
            let rdir = run_dir(&out, variant, o.run_index);
            fs::create_dir_all(&rdir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", rdir.display())))?;
            let best = o.history.best();
            let meta = CheckpointMeta {
                channel_stats: Some(stats),
                channel_stats_ref: Some(stats_path.display().to_string()),
                input_downscale: cfg.input_downscale,
                epoch: Some(best.epoch),
                val_map: Some(best.val_map),
            };
            save_checkpoint(&o.model, &meta, &rdir.join(CHECKPOINT_FILE))?;
            o.history.save(&rdir)?;
            write_file(&rdir.join(TEST_REPORT_FILE), &serde_json::to_string_pretty(&o.test_report).expect("report serializes"))?;
            log::info!(
                "{} run {}: best epoch {} of {}, test mAP@0.5 {:.4}, Mean Precision {:.4}",
                variant.display_name(),
                o.run_index,
                best.epoch,
                o.history.epochs.len(),
                o.test_report.map_50,
                o.test_report.mean_precision
            );
            metrics.push(o.test_report.metrics());
        }
        let summary = VariantSummary { variant, aggregate: aggregate_runs(&metrics)?, runs: metrics };
        write_file(&vdir.join("summary.json"), &serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
    }
    Ok(())
}

pub fn cmd_eval(cfg: &PipelineConfig, checkpoint: &Path, split_name: &str, detections_out: Option<&Path>) -> Result<EvalReport, CliError> {
    require_file(checkpoint, "checkpoint")?;
    let coco = cfg.coco_path()?;
    let split_path = cfg.split_path()?;
    require_file(&coco, "COCO")?;
    require_file(&split_path, "split")?;
    let split = DatasetSplit::load(&split_path)?;
    let ids = split
        .part(split_name)
        .ok_or_else(|| CliError::Usage(format!("split must be train, val or test, got {split_name:?}")))?
        .to_vec();
    let (model, meta) = load_checkpoint(checkpoint)?;
    let stats = meta
        .channel_stats
        .ok_or_else(|| CliError::Usage(format!("{} carries no channel statistics", checkpoint.display())))?;
    let dataset = load_coco(&coco, &cfg.media_root()?)?;
    let images = pipeline::load_rgbd_images(&dataset, &ids)?;
    let samples = pipeline::build_samples(&images, model.variant, &stats, meta.input_downscale)?;
    let preds = predict_all(&model, &samples, &cfg.predict).map_err(PipelineError::from)?;
    let targets: Vec<_> = samples.iter().map(|s| s.targets.clone()).collect();
    let report = evaluate_split(&preds, &targets, model.arch.num_classes, &cfg.eval)?;
    if let Some(path) = detections_out {
        let results: Vec<CocoResult> = images
            .iter()
            .zip(&preds)
            .flat_map(|((ex, _), dets)| {
                pipeline::upscale_detections(dets, meta.input_downscale)
                    .into_iter()
                    .map(move |d| CocoResult::from_detection(ex.id, &d))
            })
            .collect();
        write_coco_results(&results, path)?;
    }
    log::info!("{split_name}: mAP@0.5 {:.4}, Mean Precision {:.4}", report.map_50, report.mean_precision);
    Ok(report)
}

/// Reads `<variant>/run_*/test_report.json` under `runs_dir` and aggregates each variant.
pub fn collect_run_metrics(runs_dir: &Path) -> Result<BTreeMap<VariantKind, Vec<RunMetrics>>, CliError> {
    let mut all = BTreeMap::new();
    for variant in VariantKind::ALL {
        let vdir = variant_dir(runs_dir, variant);
        if !vdir.is_dir() {
            continue;
        }
        let mut run_dirs: Vec<PathBuf> = fs::read_dir(&vdir)
            .map_err(|e| CliError::Runtime(format!("cannot list {}: {e}", vdir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("run_")))
            .collect();
        run_dirs.sort();
        let mut metrics = Vec::new();
        for dir in run_dirs {
            let path = dir.join(TEST_REPORT_FILE);
            let text = fs::read_to_string(&path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
            let report: EvalReport =
                serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid report {}: {e}", path.display())))?;
            metrics.push(report.metrics());
        }
        if !metrics.is_empty() {
            all.insert(variant, metrics);
        }
    }
    Ok(all)
}

pub fn cmd_report(runs_dir: &Path, format: ReportFormat, out: Option<&Path>) -> Result<(), CliError> {
    require_dir(runs_dir, "runs")?;
    let metrics = collect_run_metrics(runs_dir)?;
    if metrics.len() < 2 {
        return Err(CliError::Usage(format!("{} holds results for fewer than two variants", runs_dir.display())));
    }
    let mut aggregates = BTreeMap::new();
    for (variant, runs) in &metrics {
        aggregates.insert(*variant, aggregate_runs(runs)?);
    }
    let report = comparison_report(&aggregates)?;
    let text = match format {
        ReportFormat::Markdown => report.to_markdown(),
        ReportFormat::Csv => report.to_csv(),
        ReportFormat::Json => report.to_json(),
    };
    emit(&text, out)
}

pub fn cmd_overlay(image: &Path, detections: &Path, image_id: Option<u64>, score_threshold: f64, out: &Path) -> Result<(), CliError> {
    require_file(image, "image")?;
    require_file(detections, "detections")?;
    let img = image::open(image).map_err(|e| CliError::Usage(format!("cannot decode {}: {e}", image.display())))?.to_rgb8();
    let dets: Vec<_> = read_coco_results(detections)?
        .into_iter()
        .filter(|r| image_id.is_none_or(|id| r.image_id == id) && r.score >= score_threshold)
        .map(|r| r.to_detection())
        .collect();
    let drawn = overlay::draw_detections(&img, &dets, &ClassCatalog::default());
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", parent.display())))?;
    }
    drawn.save(out).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", out.display())))?;
    log::info!("drew {} detections onto {}", dets.len(), out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_parsing() {
        assert_eq!(parse_counts("226,45,30").unwrap(), (226, 45, 30));
        assert_eq!(parse_counts(" 1, 2 ,3").unwrap(), (1, 2, 3));
        assert!(parse_counts("1,2").is_err());
        assert!(parse_counts("a,b,c").is_err());
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["rgbd", "frobnicate"]), 2);
        assert_eq!(run(["rgbd", "project", "--calib", "/nonexistent/c.json", "--clouds", "/tmp", "--out", "/tmp/x"]), 2);
        assert_eq!(run(["rgbd", "--help"]), 0);
    }
}
