//! Camera/depth-sensor calibration data, pinhole projection and calibration-pair pruning.
//!
//! Extrinsics map depth-sensor coordinates into the camera frame. The camera looks
//! down +z; pixel `u` grows with +x and `v` with +y. Skew and lens distortion are
//! not modeled.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Points with camera-frame depth at or below this value are treated as behind the camera.
pub const Z_MIN: f64 = 1e-6;

/// Default maximum translation error for pair pruning, meters.
pub const DEFAULT_MAX_TRANSLATION_M: f64 = 0.0045;
/// Default maximum rotation error for pair pruning, degrees.
pub const DEFAULT_MAX_ROTATION_DEG: f64 = 4.5;

const ORTHONORMAL_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum CalibError {
    #[error("malformed calibration file: {0}")]
    MalformedFile(String),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid extrinsics: {0}")]
    InvalidExtrinsics(String),
    #[error("invalid pruning thresholds: {0}")]
    InvalidThreshold(String),
    #[error("every calibration pair had to be removed")]
    EmptyResult,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<(), CalibError> {
        let bad = |msg: String| Err(CalibError::InvalidIntrinsics(msg));
        if !(self.fx.is_finite() && self.fx > 0.0) || !(self.fy.is_finite() && self.fy > 0.0) {
            return bad(format!("focal lengths must be positive (fx={}, fy={})", self.fx, self.fy));
        }
        if self.width == 0 || self.height == 0 {
            return bad(format!("image size {}x{} is empty", self.width, self.height));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return bad(format!("cx={} outside [0, {})", self.cx, self.width));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return bad(format!("cy={} outside [0, {})", self.cy, self.height));
        }
        Ok(())
    }

    /// Back-projects pixel coordinates at camera-frame depth `z`.
    pub fn back_project(&self, u: f64, v: f64, z: f64) -> [f64; 3] {
        [(u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z]
    }
}

/// A rigid 4x4 homogeneous transform, row-major.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    m: [[f64; 4]; 4],
}

impl RigidTransform {
    pub fn identity() -> Self {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Self { m }
    }

    /// Validates and wraps a row-major matrix.
    pub fn from_matrix(m: [[f64; 4]; 4]) -> Result<Self, CalibError> {
        let t = Self { m };
        t.validate()?;
        Ok(t)
    }

    pub fn from_row_major(values: &[f64]) -> Result<Self, CalibError> {
        if values.len() != 16 {
            return Err(CalibError::InvalidExtrinsics(format!(
                "expected 16 values, got {}",
                values.len()
            )));
        }
        let mut m = [[0.0; 4]; 4];
        for (i, v) in values.iter().enumerate() {
            m[i / 4][i % 4] = *v;
        }
        Self::from_matrix(m)
    }

    /// Builds a transform from a rotation block and a translation in meters.
    pub fn from_parts(rotation: [[f64; 3]; 3], translation: [f64; 3]) -> Result<Self, CalibError> {
        let mut m = [[0.0; 4]; 4];
        for r in 0..3 {
            m[r][..3].copy_from_slice(&rotation[r]);
            m[r][3] = translation[r];
        }
        m[3][3] = 1.0;
        Self::from_matrix(m)
    }

    /// Rotation from an axis (need not be unit length) and an angle in radians.
    pub fn from_axis_angle(axis: [f64; 3], angle: f64, translation: [f64; 3]) -> Result<Self, CalibError> {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        if !(n > 0.0) {
            return Err(CalibError::InvalidExtrinsics("zero rotation axis".into()));
        }
        let [x, y, z] = [axis[0] / n, axis[1] / n, axis[2] / n];
        let (s, c) = angle.sin_cos();
        let t = 1.0 - c;
        let r = [
            [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
            [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
            [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
        ];
        Self::from_parts(r, translation)
    }

    pub fn matrix(&self) -> &[[f64; 4]; 4] {
        &self.m
    }

    pub fn to_row_major(&self) -> Vec<f64> {
        self.m.iter().flatten().copied().collect()
    }

    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            row.copy_from_slice(&self.m[i][..3]);
        }
        r
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.m[0][3], self.m[1][3], self.m[2][3]]
    }

    fn validate(&self) -> Result<(), CalibError> {
        if self.m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(CalibError::InvalidExtrinsics("non-finite entry".into()));
        }
        if self.m[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(CalibError::InvalidExtrinsics(format!(
                "bottom row must be [0,0,0,1], got {:?}",
                self.m[3]
            )));
        }
        let r = self.rotation();
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        if worst >= ORTHONORMAL_TOL {
            return Err(CalibError::InvalidExtrinsics(format!(
                "rotation block is not orthonormal (max |R^T R - I| = {worst:e})"
            )));
        }
        if det3(&r) <= 0.0 {
            return Err(CalibError::InvalidExtrinsics("rotation block has non-positive determinant".into()));
        }
        Ok(())
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.m;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2] + m[0][3],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2] + m[1][3],
            m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2] + m[2][3],
        ]
    }

    /// Closed-form inverse `[R^T | -R^T t]`.
    pub fn inverse(&self) -> Self {
        let r = self.rotation();
        let t = self.translation();
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = r[j][i];
            }
            m[i][3] = -(r[0][i] * t[0] + r[1][i] * t[1] + r[2][i] * t[2]);
        }
        m[3][3] = 1.0;
        Self { m }
    }

    /// `self * other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..4).map(|k| self.m[i][k] * other.m[k][j]).sum();
            }
        }
        Self { m }
    }
}

fn det3(r: &[[f64; 3]; 3]) -> f64 {
    r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
}

/// Intrinsics plus the depth-sensor to camera transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationBundle {
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: RigidTransform,
}

#[derive(Serialize, Deserialize)]
struct CalibrationFile {
    intrinsics: CameraIntrinsics,
    extrinsic: Vec<f64>,
}

impl CalibrationBundle {
    pub fn new(intrinsics: CameraIntrinsics, extrinsics: RigidTransform) -> Result<Self, CalibError> {
        intrinsics.validate()?;
        extrinsics.validate()?;
        Ok(Self { intrinsics, extrinsics })
    }

    pub fn from_json(text: &str) -> Result<Self, CalibError> {
        let file: CalibrationFile =
            serde_json::from_str(text).map_err(|e| CalibError::MalformedFile(e.to_string()))?;
        file.intrinsics.validate()?;
        let extrinsics = RigidTransform::from_row_major(&file.extrinsic)?;
        Ok(Self { intrinsics: file.intrinsics, extrinsics })
    }

    pub fn to_json(&self) -> String {
        let file = CalibrationFile { intrinsics: self.intrinsics, extrinsic: self.extrinsics.to_row_major() };
        serde_json::to_string_pretty(&file).expect("calibration serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), CalibError> {
        fs::write(path, self.to_json())
            .map_err(|source| CalibError::Io { path: path.display().to_string(), source })
    }

    /// Continuous projection before pixel rounding: `(u, v, z)` or `None` when behind the camera.
    pub fn project_continuous(&self, p: [f64; 3]) -> Option<(f64, f64, f64)> {
        let [x, y, z] = self.extrinsics.apply(p);
        if z <= Z_MIN {
            return None;
        }
        let k = &self.intrinsics;
        Some((k.fx * x / z + k.cx, k.fy * y / z + k.cy, z))
    }
}

/// Reads a calibration JSON document with `intrinsics` and a row-major `extrinsic` array.
pub fn load_calibration(path: &Path) -> Result<CalibrationBundle, CalibError> {
    let text = fs::read_to_string(path)
        .map_err(|source| CalibError::Io { path: path.display().to_string(), source })?;
    CalibrationBundle::from_json(&text)
}

/// A point that landed on the image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelHit {
    pub u: u32,
    pub v: u32,
    /// Camera-frame depth, meters.
    pub z: f64,
}

/// Projects a depth-sensor point to its nearest pixel. Returns `None` for points
/// behind the camera or outside the image.
pub fn project_point(p: [f64; 3], calib: &CalibrationBundle) -> Option<PixelHit> {
    let (u, v, z) = calib.project_continuous(p)?;
    // f64::round rounds half away from zero.
    let (u, v) = (u.round(), v.round());
    let k = &calib.intrinsics;
    if u < 0.0 || v < 0.0 || u >= k.width as f64 || v >= k.height as f64 {
        return None;
    }
    Some(PixelHit { u: u as u32, v: v as u32, z })
}

/// Residual calibration error of one image / point-cloud pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairError {
    pub pair_id: String,
    #[serde(rename = "translation_error_m")]
    pub translation_error: f64,
    #[serde(rename = "rotation_error_deg")]
    pub rotation_error: f64,
}

impl PairError {
    fn severity(&self, max_translation: f64, max_rotation: f64) -> f64 {
        (self.translation_error / max_translation).max(self.rotation_error / max_rotation)
    }
}

/// Reads pair errors from CSV with header `pair_id,translation_error_m,rotation_error_deg`.
pub fn read_pair_errors(path: &Path) -> Result<Vec<PairError>, CalibError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| CalibError::MalformedFile(e.to_string()))?;
    let mut out = Vec::new();
    for row in reader.deserialize() {
        let pair: PairError = row.map_err(|e| CalibError::MalformedFile(e.to_string()))?;
        if !(pair.translation_error >= 0.0 && pair.rotation_error >= 0.0) {
            return Err(CalibError::MalformedFile(format!("negative error for pair {}", pair.pair_id)));
        }
        out.push(pair);
    }
    Ok(out)
}

/// Greedily drops the worst pair until every survivor is strictly below both
/// thresholds. The worst pair maximizes `max(t / max_t, r / max_r)`; ties go to
/// the earliest pair. Survivors keep their input order.
pub fn prune_calibration_pairs(
    errors: &[PairError],
    max_translation: f64,
    max_rotation: f64,
) -> Result<Vec<PairError>, CalibError> {
    if !(max_translation > 0.0 && max_rotation > 0.0) {
        return Err(CalibError::InvalidThreshold(format!(
            "thresholds must be positive (translation {max_translation}, rotation {max_rotation})"
        )));
    }
    let mut kept: Vec<&PairError> = errors.iter().collect();
    loop {
        let compliant = kept
            .iter()
            .all(|p| p.translation_error < max_translation && p.rotation_error < max_rotation);
        if compliant {
            break;
        }
        let mut worst = 0;
        for (i, p) in kept.iter().enumerate() {
            if p.severity(max_translation, max_rotation) > kept[worst].severity(max_translation, max_rotation) {
                worst = i;
            }
        }
        kept.remove(worst);
    }
    if kept.is_empty() {
        return Err(CalibError::EmptyResult);
    }
    Ok(kept.into_iter().cloned().collect())
}
