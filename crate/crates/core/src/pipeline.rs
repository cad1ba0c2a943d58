//! File-level pipeline stages shared by the command-line tool and the tests:
//! cloud projection, RGB-D packing, and turning a split into network inputs.

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rayon::prelude::*;
use thiserror::Error;

use crate::calib::{CalibError, CalibrationBundle};
use crate::dataset::{Dataset, DatasetError, DatasetSplit, Example};
use crate::depth::{compute_depth_stats, depth_map_to_channel, point_cloud_to_depth_map, DepthError, DepthMap, DepthStats, PointCloud};
use crate::detect::{BBox, DetectError, Detection, Sample, Targets};
use crate::evaluate::EvalError;
use crate::fusion::{
    compute_channel_stats, normalize_input, pack_rgbd, read_rgbd, select_channels, write_rgbd, ChannelGrid, ChannelStats,
    FusionError, RgbdImage, VariantKind,
};
use crate::train::{PreparedSplits, TrainError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Invalid(String),
    #[error("io error on {path}: {msg}")]
    Io { path: String, msg: String },
    #[error(transparent)]
    Calib(#[from] CalibError),
    #[error(transparent)]
    Depth(#[from] DepthError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl PipelineError {
    /// Whether the failure comes from the inputs rather than from running the stage.
    pub fn is_validation(&self) -> bool {
        match self {
            PipelineError::Invalid(_) | PipelineError::Calib(_) => true,
            PipelineError::Depth(e) => matches!(e, DepthError::MalformedCloud { .. } | DepthError::NoValidPixels),
            PipelineError::Fusion(e) => matches!(e, FusionError::DimensionMismatch(_) | FusionError::NotFourChannel { .. }),
            PipelineError::Dataset(e) => !matches!(e, DatasetError::Io { .. }),
            PipelineError::Train(e) => matches!(e, TrainError::ConfigInvalid(_) | TrainError::EmptySplit(_)),
            PipelineError::Detect(e) => matches!(e, DetectError::ConfigInvalid(_) | DetectError::Checkpoint { .. }),
            PipelineError::Io { .. } | PipelineError::Eval(_) => false,
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Io { path: path.display().to_string(), msg: e.to_string() }
}

/// Files in `dir` with one of `extensions`, sorted by name.
pub fn list_files(dir: &Path, extensions: &[&str]) -> Result<Vec<PathBuf>, PipelineError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().and_then(|e| e.to_str()).is_some_and(|e| extensions.contains(&e)))
        .collect();
    files.sort();
    Ok(files)
}

fn stem_of(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string()
}

pub const DEPTH_STATS_FILE: &str = "depth_stats.json";
pub const CHANNEL_STATS_FILE: &str = "channel_stats.json";

/// Projects every cloud in `clouds_dir` (`.xyz` / `.xyzb`) into a 16-bit
/// millimeter depth PNG in `out_dir`, then writes `depth_stats.json` computed
/// over the maps exactly as stored.
pub fn project_clouds(calib: &CalibrationBundle, clouds_dir: &Path, out_dir: &Path) -> Result<DepthStats, PipelineError> {
    let clouds = list_files(clouds_dir, &["xyz", "xyzb"])?;
    if clouds.is_empty() {
        return Err(PipelineError::Invalid(format!("no .xyz or .xyzb clouds in {}", clouds_dir.display())));
    }
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let maps: Vec<DepthMap> = clouds
        .par_iter()
        .map(|path| {
            let cloud = PointCloud::read(path)?;
            let map = point_cloud_to_depth_map(&cloud, calib).quantized_mm();
            map.write_png_mm(&out_dir.join(format!("{}.png", stem_of(path))))?;
            Ok(map)
        })
        .collect::<Result<_, PipelineError>>()?;
    let stats = compute_depth_stats(maps.iter())?;
    stats.save(&out_dir.join(DEPTH_STATS_FILE))?;
    log::info!("projected {} clouds into {}", maps.len(), out_dir.display());
    Ok(stats)
}

/// Packs `rgb_dir/<stem>.png` with `depth_dir/<stem>.png` into `out_dir/<stem>.png`.
/// Returns the number of images written.
pub fn pack_directory(rgb_dir: &Path, depth_dir: &Path, stats: &DepthStats, out_dir: &Path) -> Result<usize, PipelineError> {
    let rgbs = list_files(rgb_dir, &["png"])?;
    if rgbs.is_empty() {
        return Err(PipelineError::Invalid(format!("no RGB images in {}", rgb_dir.display())));
    }
    for rgb in &rgbs {
        let depth = depth_dir.join(format!("{}.png", stem_of(rgb)));
        if !depth.is_file() {
            return Err(PipelineError::Invalid(format!("no depth map {} for {}", depth.display(), rgb.display())));
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    rgbs.par_iter()
        .map(|rgb_path| {
            let stem = stem_of(rgb_path);
            let rgb = image::open(rgb_path).map_err(|e| io_err(rgb_path, e))?.to_rgb8();
            let depth = DepthMap::read_png_mm(&depth_dir.join(format!("{stem}.png")))?;
            let packed = pack_map(&rgb, &depth, stats)?;
            write_rgbd(&packed, &out_dir.join(format!("{stem}.png")))?;
            Ok(())
        })
        .collect::<Result<Vec<()>, PipelineError>>()?;
    log::info!("packed {} RGB-D images into {}", rgbs.len(), out_dir.display());
    Ok(rgbs.len())
}

/// Scales a depth map to 8 bits and stacks it under the RGB image.
pub fn pack_map(rgb: &RgbImage, depth: &DepthMap, stats: &DepthStats) -> Result<RgbdImage, PipelineError> {
    if (rgb.width(), rgb.height()) != (depth.width(), depth.height()) {
        return Err(FusionError::DimensionMismatch(format!(
            "RGB is {}x{}, depth is {}x{}",
            rgb.width(),
            rgb.height(),
            depth.width(),
            depth.height()
        ))
        .into());
    }
    let channel = depth_map_to_channel(depth, stats)?;
    let grid = ChannelGrid::new(depth.width(), depth.height(), 1, channel)?;
    Ok(pack_rgbd(rgb, &grid)?)
}

/// Reads the RGB-D images of `ids`, in order.
pub fn load_rgbd_images(dataset: &Dataset, ids: &[u64]) -> Result<Vec<(Example, RgbdImage)>, PipelineError> {
    ids.par_iter()
        .map(|&id| {
            let ex = dataset.example(id).ok_or(DatasetError::UnknownExample(id))?;
            let img = read_rgbd(&ex.rgbd)?;
            if (img.width(), img.height()) != (ex.width, ex.height) {
                return Err(FusionError::DimensionMismatch(format!(
                    "{} is {}x{}, annotations say {}x{}",
                    ex.rgbd.display(),
                    img.width(),
                    img.height(),
                    ex.width,
                    ex.height
                ))
                .into());
            }
            Ok((ex.clone(), img))
        })
        .collect()
}

/// Ground truth of an example in network-input pixels.
pub fn example_targets(example: &Example, downscale: u32) -> Targets {
    let s = 1.0 / downscale.max(1) as f64;
    Targets {
        boxes: example.annotations.iter().map(|a| a.bbox.scale(s)).collect(),
        classes: example.annotations.iter().map(|a| a.class_id).collect(),
    }
}

/// Channel selection, optional downscale and normalization of one image.
pub fn image_to_input(img: &RgbdImage, variant: VariantKind, stats: &ChannelStats, downscale: u32) -> Result<crate::tensor::Tensor, PipelineError> {
    let grid = select_channels(img, variant).downscale(downscale.max(1));
    let (mean, std) = stats.for_variant(variant);
    Ok(normalize_input(&grid, &mean, &std)?)
}

pub fn build_samples(
    images: &[(Example, RgbdImage)],
    variant: VariantKind,
    stats: &ChannelStats,
    downscale: u32,
) -> Result<Vec<Sample>, PipelineError> {
    images
        .par_iter()
        .map(|(ex, img)| Ok(Sample { input: image_to_input(img, variant, stats, downscale)?, targets: example_targets(ex, downscale) }))
        .collect()
}

/// Network inputs for the three splits. Channel statistics come from the
/// training split only and are returned so they can be stored with the model.
pub fn prepare_splits(
    dataset: &Dataset,
    split: &DatasetSplit,
    variant: VariantKind,
    downscale: u32,
) -> Result<(PreparedSplits, ChannelStats), PipelineError> {
    let train_imgs = load_rgbd_images(dataset, &split.train)?;
    let stats = compute_channel_stats(train_imgs.iter().map(|(_, img)| img))?;
    let val_imgs = load_rgbd_images(dataset, &split.val)?;
    let test_imgs = load_rgbd_images(dataset, &split.test)?;
    let prepared = PreparedSplits {
        train: build_samples(&train_imgs, variant, &stats, downscale)?,
        val: build_samples(&val_imgs, variant, &stats, downscale)?,
        test: build_samples(&test_imgs, variant, &stats, downscale)?,
    };
    Ok((prepared, stats))
}

/// Maps detections from network-input pixels back to image pixels.
pub fn upscale_detections(dets: &[Detection], downscale: u32) -> Vec<Detection> {
    let s = downscale.max(1) as f64;
    dets.iter().map(|d| Detection { bbox: d.bbox.scale(s), ..*d }).collect()
}

/// Clips a box to an image, used before drawing.
pub fn clip_to_image(b: &BBox, width: u32, height: u32) -> BBox {
    b.clip(width as f64, height as f64)
}
