//! Point clouds, z-buffered depth maps, and depth normalization/scaling to 8 bits.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use image::{ImageBuffer, Luma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calib::{project_point, CalibrationBundle};

#[derive(Debug, Error)]
pub enum DepthError {
    #[error("no valid depth pixel in the collection")]
    NoValidPixels,
    #[error("degenerate depth range: d_min = d_max = {0}")]
    DegenerateRange(f64),
    #[error("normalized depth {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("depth {d} outside [{d_min}, {d_max}]")]
    DepthOutsideStats { d: f64, d_min: f64, d_max: f64 },
    #[error("malformed point cloud {path}: {msg}")]
    MalformedCloud { path: String, msg: String },
    #[error("depth map value {0} cannot be stored as 16-bit millimeters")]
    Unrepresentable(f64),
    #[error("io error on {path}: {msg}")]
    Io { path: String, msg: String },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> DepthError {
    DepthError::Io { path: path.display().to_string(), msg: e.to_string() }
}

/// Unordered 3D points in the depth-sensor frame, meters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Reads whitespace-separated `x y z` lines. Blank lines and `#` comments are skipped.
    pub fn read_xyz(path: &Path) -> Result<Self, DepthError> {
        let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
        let mut points = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| io_err(path, e))?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let malformed = |msg: String| DepthError::MalformedCloud {
                path: path.display().to_string(),
                msg: format!("line {}: {msg}", lineno + 1),
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(malformed(format!("expected 3 fields, got {}", fields.len())));
            }
            let mut p = [0.0f64; 3];
            for (slot, field) in p.iter_mut().zip(&fields) {
                *slot = field.parse().map_err(|_| malformed(format!("bad number {field:?}")))?;
                if !slot.is_finite() {
                    return Err(malformed("non-finite coordinate".into()));
                }
            }
            points.push(p);
        }
        Ok(Self { points })
    }

    /// Writes one `x y z` line per point with round-trip exact formatting.
    pub fn write_xyz(&self, path: &Path) -> Result<(), DepthError> {
        let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
        let mut w = BufWriter::new(file);
        for p in &self.points {
            writeln!(w, "{} {} {}", p[0], p[1], p[2]).map_err(|e| io_err(path, e))?;
        }
        w.flush().map_err(|e| io_err(path, e))
    }

    /// Reads packed little-endian float32 triples.
    pub fn read_xyzb(path: &Path) -> Result<Self, DepthError> {
        let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
        if bytes.len() % 12 != 0 {
            return Err(DepthError::MalformedCloud {
                path: path.display().to_string(),
                msg: format!("length {} is not a multiple of 12", bytes.len()),
            });
        }
        let mut points = Vec::with_capacity(bytes.len() / 12);
        for chunk in bytes.chunks_exact(12) {
            let mut p = [0.0; 3];
            for (k, slot) in p.iter_mut().enumerate() {
                let v = f32::from_le_bytes(chunk[4 * k..4 * k + 4].try_into().unwrap());
                if !v.is_finite() {
                    return Err(DepthError::MalformedCloud {
                        path: path.display().to_string(),
                        msg: "non-finite coordinate".into(),
                    });
                }
                *slot = v as f64;
            }
            points.push(p);
        }
        Ok(Self { points })
    }

    pub fn write_xyzb(&self, path: &Path) -> Result<(), DepthError> {
        let mut bytes = Vec::with_capacity(self.points.len() * 12);
        for p in &self.points {
            for v in p {
                bytes.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        fs::write(path, bytes).map_err(|e| io_err(path, e))
    }

    /// Dispatches on extension: `.xyzb` is binary, anything else ASCII.
    pub fn read(path: &Path) -> Result<Self, DepthError> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("xyzb") => Self::read_xyzb(path),
            _ => Self::read_xyz(path),
        }
    }
}

/// Per-pixel camera-frame depth in meters, row-major; 0.0 marks "no data".
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: u32,
    height: u32,
    values: Vec<f64>,
}

impl DepthMap {
    pub fn zeros(width: u32, height: u32) -> Self {
        Self { width, height, values: vec![0.0; width as usize * height as usize] }
    }

    /// Panics if the length does not match or a value is negative or non-finite.
    pub fn from_values(width: u32, height: u32, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), width as usize * height as usize, "depth map size mismatch");
        assert!(values.iter().all(|v| v.is_finite() && *v >= 0.0), "depth values must be finite and >= 0");
        Self { width, height, values }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, u: u32, v: u32) -> f64 {
        self.values[v as usize * self.width as usize + u as usize]
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|v| **v > 0.0).count()
    }

    /// Rounds every value to whole millimeters, matching what [`DepthMap::write_png_mm`] stores.
    pub fn quantized_mm(&self) -> Self {
        let values = self.values.iter().map(|v| (v * 1000.0).round() / 1000.0).collect();
        Self { width: self.width, height: self.height, values }
    }

    /// Stores the map as a 16-bit grayscale PNG in millimeters.
    pub fn write_png_mm(&self, path: &Path) -> Result<(), DepthError> {
        let mut raw = Vec::with_capacity(self.values.len());
        for v in &self.values {
            let mm = (v * 1000.0).round();
            if mm > u16::MAX as f64 {
                return Err(DepthError::Unrepresentable(*v));
            }
            raw.push(mm as u16);
        }
        let img: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(self.width, self.height, raw).expect("buffer sized from map");
        img.save(path).map_err(|e| io_err(path, e))
    }

    pub fn read_png_mm(path: &Path) -> Result<Self, DepthError> {
        let img = image::open(path).map_err(|e| io_err(path, e))?;
        let gray = match img {
            image::DynamicImage::ImageLuma16(g) => g,
            other => {
                return Err(io_err(path, format!("expected 16-bit grayscale, got {:?}", other.color())));
            }
        };
        let (w, h) = gray.dimensions();
        let values = gray.into_raw().into_iter().map(|mm| mm as f64 / 1000.0).collect();
        Ok(Self { width: w, height: h, values })
    }
}

/// Projects every point and keeps the nearest depth per pixel.
pub fn point_cloud_to_depth_map(cloud: &PointCloud, calib: &CalibrationBundle) -> DepthMap {
    let k = &calib.intrinsics;
    let mut map = DepthMap::zeros(k.width, k.height);
    let w = k.width as usize;
    for p in &cloud.points {
        if let Some(hit) = project_point(*p, calib) {
            let slot = &mut map.values[hit.v as usize * w + hit.u as usize];
            if *slot == 0.0 || hit.z < *slot {
                *slot = hit.z;
            }
        }
    }
    map
}

/// Dataset-wide depth statistics. `d_min`/`d_max` are meters over valid pixels;
/// `mean_scaled`/`std_scaled` describe the 0..255 scaled values of the same pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthStats {
    pub d_min: f64,
    pub d_max: f64,
    pub mean_scaled: f64,
    pub std_scaled: f64,
    pub valid_pixel_count: u64,
}

impl DepthStats {
    pub fn load(path: &Path) -> Result<Self, DepthError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| io_err(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<(), DepthError> {
        let text = serde_json::to_string_pretty(self).expect("stats serialize");
        fs::write(path, text).map_err(|e| io_err(path, e))
    }
}

/// Two passes: range over valid pixels, then population moments of the scaled values.
/// For a constant-depth collection the scaled moments are reported as zero.
pub fn compute_depth_stats<'a, I>(maps: I) -> Result<DepthStats, DepthError>
where
    I: IntoIterator<Item = &'a DepthMap>,
    I::IntoIter: Clone,
{
    let maps = maps.into_iter();
    let mut d_min = f64::INFINITY;
    let mut d_max = f64::NEG_INFINITY;
    let mut count = 0u64;
    for v in maps.clone().flat_map(|m| m.values.iter()).filter(|v| **v > 0.0) {
        d_min = d_min.min(*v);
        d_max = d_max.max(*v);
        count += 1;
    }
    if count == 0 {
        return Err(DepthError::NoValidPixels);
    }
    if d_max == d_min {
        return Ok(DepthStats { d_min, d_max, mean_scaled: 0.0, std_scaled: 0.0, valid_pixel_count: count });
    }
    let range = d_max - d_min;
    let scaled = |v: f64| (v - d_min) / range * 255.0;
    let mut sum = 0.0;
    for v in maps.clone().flat_map(|m| m.values.iter()).filter(|v| **v > 0.0) {
        sum += scaled(*v);
    }
    let mean = sum / count as f64;
    let mut sq = 0.0;
    for v in maps.flat_map(|m| m.values.iter()).filter(|v| **v > 0.0) {
        let d = scaled(*v) - mean;
        sq += d * d;
    }
    Ok(DepthStats {
        d_min,
        d_max,
        mean_scaled: mean,
        std_scaled: (sq / count as f64).sqrt(),
        valid_pixel_count: count,
    })
}

/// Maps a valid depth linearly onto [0, 1] over the dataset range; 0.0 (no data) stays 0.
pub fn normalize_depth(d: f64, stats: &DepthStats) -> Result<f64, DepthError> {
    if stats.d_max == stats.d_min {
        return Err(DepthError::DegenerateRange(stats.d_min));
    }
    if d == 0.0 {
        return Ok(0.0);
    }
    if !(d >= stats.d_min && d <= stats.d_max) {
        return Err(DepthError::DepthOutsideStats { d, d_min: stats.d_min, d_max: stats.d_max });
    }
    Ok((d - stats.d_min) / (stats.d_max - stats.d_min))
}

/// `round(d_norm * 255)`, half away from zero.
pub fn scale_depth(d_norm: f64) -> Result<u8, DepthError> {
    if !(0.0..=1.0).contains(&d_norm) {
        return Err(DepthError::OutOfRange(d_norm));
    }
    Ok((d_norm * 255.0).round() as u8)
}

/// Normalizes and scales every pixel. Valid pixels at exactly `d_min` also become 0
/// and are indistinguishable from no-data afterwards.
pub fn depth_map_to_channel(map: &DepthMap, stats: &DepthStats) -> Result<Vec<u8>, DepthError> {
    map.values.iter().map(|d| scale_depth(normalize_depth(*d, stats)?)).collect()
}
