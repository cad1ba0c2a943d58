//! Four-channel RGB-D images: packing, PNG persistence, per-variant channel
//! selection and input normalization.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use image::{DynamicImage, RgbImage, RgbaImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("{path} is not a four-channel 8-bit image (found {found})")]
    NotFourChannel { path: String, found: String },
    #[error("channel {0} has zero standard deviation")]
    ZeroStd(usize),
    #[error("cannot compute channel statistics of an empty dataset")]
    EmptyDataset,
    #[error("io failure on {path}: {msg}")]
    IoFailure { path: String, msg: String },
}

fn io_failure(path: &Path, e: impl fmt::Display) -> FusionError {
    FusionError::IoFailure { path: path.display().to_string(), msg: e.to_string() }
}

/// Which input channels a detector consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    DepthOnly,
    RgbOnly,
    Rgbd,
}

impl VariantKind {
    pub const ALL: [VariantKind; 3] = [VariantKind::DepthOnly, VariantKind::RgbOnly, VariantKind::Rgbd];

    pub fn channel_count(self) -> usize {
        match self {
            VariantKind::RgbOnly => 3,
            VariantKind::DepthOnly => 1,
            VariantKind::Rgbd => 4,
        }
    }

    /// Indices into the R, G, B, D channel order.
    pub fn channel_indices(self) -> &'static [usize] {
        match self {
            VariantKind::RgbOnly => &[0, 1, 2],
            VariantKind::DepthOnly => &[3],
            VariantKind::Rgbd => &[0, 1, 2, 3],
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            VariantKind::RgbOnly => "rgb",
            VariantKind::DepthOnly => "depth",
            VariantKind::Rgbd => "rgbd",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            VariantKind::RgbOnly => "RGB-only",
            VariantKind::DepthOnly => "Depth-only",
            VariantKind::Rgbd => "RGB-D",
        }
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for VariantKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "rgb" | "rgb_only" | "rgbonly" => Ok(VariantKind::RgbOnly),
            "depth" | "depth_only" | "depthonly" => Ok(VariantKind::DepthOnly),
            "rgbd" => Ok(VariantKind::Rgbd),
            other => Err(format!("unknown variant {other:?} (expected rgb, depth or rgbd)")),
        }
    }
}

/// Interleaved `H x W x C` 8-bit grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelGrid {
    pub width: u32,
    pub height: u32,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl ChannelGrid {
    pub fn new(width: u32, height: u32, channels: usize, data: Vec<u8>) -> Result<Self, FusionError> {
        let expected = width as usize * height as usize * channels;
        if data.len() != expected {
            return Err(FusionError::DimensionMismatch(format!(
                "{}x{}x{} grid needs {expected} bytes, got {}",
                width,
                height,
                channels,
                data.len()
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn from_rgb(img: &RgbImage) -> Self {
        Self { width: img.width(), height: img.height(), channels: 3, data: img.as_raw().clone() }
    }

    /// Integer-factor area downscale (mean over each `factor x factor` block, rounded).
    /// Trailing rows/columns that do not fill a block are dropped.
    pub fn downscale(&self, factor: u32) -> Self {
        if factor <= 1 {
            return self.clone();
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let c = self.channels;
        let f = factor as usize;
        let mut data = vec![0u8; w as usize * h as usize * c];
        for y in 0..h as usize {
            for x in 0..w as usize {
                for ch in 0..c {
                    let mut acc = 0u32;
                    for dy in 0..f {
                        for dx in 0..f {
                            let sy = y * f + dy;
                            let sx = x * f + dx;
                            acc += self.data[(sy * self.width as usize + sx) * c + ch] as u32;
                        }
                    }
                    let n = (f * f) as f64;
                    data[(y * w as usize + x) * c + ch] = (acc as f64 / n).round() as u8;
                }
            }
        }
        Self { width: w, height: h, channels: c, data }
    }
}

/// Fused image: R, G, B and scaled depth, 8 bits each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbdImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl RgbdImage {
    pub fn from_raw(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, FusionError> {
        if pixels.len() != width as usize * height as usize * 4 {
            return Err(FusionError::DimensionMismatch(format!(
                "{}x{} RGB-D image needs {} bytes, got {}",
                width,
                height,
                width as usize * height as usize * 4,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 4] {
        let i = (y as usize * self.width as usize + x as usize) * 4;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2], self.pixels[i + 3]]
    }
}

/// Stacks an RGB image and a single-channel 8-bit depth grid into RGB-D, byte for byte.
pub fn pack_rgbd(rgb: &RgbImage, depth: &ChannelGrid) -> Result<RgbdImage, FusionError> {
    if depth.channels != 1 {
        return Err(FusionError::DimensionMismatch(format!("depth grid has {} channels", depth.channels)));
    }
    if rgb.dimensions() != (depth.width, depth.height) {
        return Err(FusionError::DimensionMismatch(format!(
            "rgb is {}x{}, depth is {}x{}",
            rgb.width(),
            rgb.height(),
            depth.width,
            depth.height
        )));
    }
    let mut pixels = Vec::with_capacity(depth.data.len() * 4);
    for (rgb_px, d) in rgb.as_raw().chunks_exact(3).zip(&depth.data) {
        pixels.extend_from_slice(rgb_px);
        pixels.push(*d);
    }
    Ok(RgbdImage { width: depth.width, height: depth.height, pixels })
}

/// Lossless 8-bit RGBA PNG (straight alpha).
pub fn write_rgbd(img: &RgbdImage, path: &Path) -> Result<(), FusionError> {
    let buf = RgbaImage::from_raw(img.width, img.height, img.pixels.clone()).expect("sized at construction");
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| io_failure(path, e))
}

pub fn read_rgbd(path: &Path) -> Result<RgbdImage, FusionError> {
    let bytes = fs::read(path).map_err(|e| io_failure(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(|e| io_failure(path, e))?;
    match img {
        DynamicImage::ImageRgba8(buf) => {
            let (width, height) = buf.dimensions();
            Ok(RgbdImage { width, height, pixels: buf.into_raw() })
        }
        other => Err(FusionError::NotFourChannel {
            path: path.display().to_string(),
            found: format!("{:?}", other.color()),
        }),
    }
}

/// Keeps the channels a variant consumes.
pub fn select_channels(img: &RgbdImage, variant: VariantKind) -> ChannelGrid {
    let idx = variant.channel_indices();
    let mut data = Vec::with_capacity(img.pixels.len() / 4 * idx.len());
    for px in img.pixels.chunks_exact(4) {
        data.extend(idx.iter().map(|&c| px[c]));
    }
    ChannelGrid { width: img.width, height: img.height, channels: idx.len(), data }
}

/// Per-channel population mean and standard deviation on the 0..255 scale, R, G, B, D order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 4],
    pub std: [f64; 4],
}

impl ChannelStats {
    /// Mean and std restricted to a variant's channels.
    pub fn for_variant(&self, variant: VariantKind) -> (Vec<f64>, Vec<f64>) {
        let idx = variant.channel_indices();
        (idx.iter().map(|&c| self.mean[c]).collect(), idx.iter().map(|&c| self.std[c]).collect())
    }

    pub fn load(path: &Path) -> Result<Self, FusionError> {
        let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
        serde_json::from_str(&text).map_err(|e| io_failure(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<(), FusionError> {
        fs::write(path, serde_json::to_string_pretty(self).expect("stats serialize")).map_err(|e| io_failure(path, e))
    }
}

/// Population moments over every pixel of every image. Depth no-data zeros are
/// included, matching what the network sees.
pub fn compute_channel_stats<'a, I>(images: I) -> Result<ChannelStats, FusionError>
where
    I: IntoIterator<Item = &'a RgbdImage>,
{
    let mut sum = [0.0f64; 4];
    let mut sum_sq = [0.0f64; 4];
    let mut count = [0u64; 4];
    let mut any = false;
    for img in images {
        any = true;
        // integer partial sums keep each image exact
        let mut s = [0u64; 4];
        let mut sq = [0u64; 4];
        let mut n = [0u64; 4];
        for px in img.pixels.chunks_exact(4) {
            for c in 0..4 {
                let v = px[c] as u64;
                s[c] += v;
                sq[c] += v * v;
                n[c] += 1;
            }
        }
        for c in 0..4 {
            sum[c] += s[c] as f64;
            sum_sq[c] += sq[c] as f64;
            count[c] += n[c];
        }
    }
    if !any || count.contains(&0) {
        return Err(FusionError::EmptyDataset);
    }
    let mut mean = [0.0; 4];
    let mut std = [0.0; 4];
    for c in 0..4 {
        let n = count[c] as f64;
        mean[c] = sum[c] / n;
        std[c] = (sum_sq[c] / n - mean[c] * mean[c]).max(0.0).sqrt();
    }
    Ok(ChannelStats { mean, std })
}

/// `(x - mean[c]) / std[c]`, returned channel-major as a `[C, H, W]` tensor.
pub fn normalize_input(grid: &ChannelGrid, mean: &[f64], std: &[f64]) -> Result<Tensor, FusionError> {
    if mean.len() != grid.channels || std.len() != grid.channels {
        return Err(FusionError::DimensionMismatch(format!(
            "{} channels but {} means / {} stds",
            grid.channels,
            mean.len(),
            std.len()
        )));
    }
    if let Some(c) = std.iter().position(|s| !(*s > 0.0)) {
        return Err(FusionError::ZeroStd(c));
    }
    let (h, w, c) = (grid.height as usize, grid.width as usize, grid.channels);
    let mut out = Tensor::zeros(&[c, h, w]);
    let plane = h * w;
    let dst = out.data_mut();
    for (i, px) in grid.data.chunks_exact(c).enumerate() {
        for ch in 0..c {
            dst[ch * plane + i] = (px[ch] as f64 - mean[ch]) / std[ch];
        }
    }
    Ok(out)
}
