//! COCO ingestion and export, deterministic splits, class balance, variant
//! views and the synthetic fixture-scene generator.
//!
//! Media layout under a dataset root: `rgb/<stem>.png`, `cloud/<stem>.xyzb`
//! (or `.xyz`), `depth/<stem>.png`, `rgbd/<stem>.png`.
//!
//! Boxes use pixel-edge coordinates: pixel `(u, v)` spans `[u, u+1) x [v, v+1)`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calib::{CalibError, CalibrationBundle, CameraIntrinsics, RigidTransform};
use crate::depth::{DepthError, PointCloud};
use crate::detect::BBox;
use crate::fusion::{read_rgbd, select_channels, ChannelGrid, FusionError, VariantKind};
use crate::seed::derive_seed;

pub const NUM_CLASSES: usize = 9;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "large_gear",
    "small_gear",
    "usbc_connector",
    "nut",
    "waterproof_connector",
    "small_rect_pin",
    "large_rect_pin",
    "small_round_pin",
    "large_round_pin",
];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("malformed COCO JSON: {0}")]
    MalformedJson(String),
    #[error("unknown category: {0}")]
    UnknownCategory(String),
    #[error("missing media for image {image}: {msg}")]
    MissingMedia { image: String, msg: String },
    #[error("degenerate box in annotation {annotation}: {msg}")]
    DegenerateBox { annotation: u64, msg: String },
    #[error("crowd annotation {0} is not supported")]
    CrowdAnnotation(u64),
    #[error("split counts {requested:?} do not sum to the dataset size {available}")]
    CountMismatch { requested: (usize, usize, usize), available: usize },
    #[error("invalid scene configuration: {0}")]
    ConfigInvalid(String),
    #[error("unknown example id {0}")]
    UnknownExample(u64),
    #[error("io error on {path}: {msg}")]
    Io { path: String, msg: String },
    #[error(transparent)]
    Calib(#[from] CalibError),
    #[error(transparent)]
    Depth(#[from] DepthError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> DatasetError {
    DatasetError::Io { path: path.display().to_string(), msg: e.to_string() }
}

/// Ordered class names; the index is the class id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCatalog {
    names: Vec<String>,
}

impl Default for ClassCatalog {
    fn default() -> Self {
        Self { names: CLASS_NAMES.iter().map(|s| s.to_string()).collect() }
    }
}

impl ClassCatalog {
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub class_id: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    /// COCO image id.
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    pub rgb: PathBuf,
    pub cloud: Option<PathBuf>,
    pub rgbd: PathBuf,
    pub annotations: Vec<Annotation>,
}

impl Example {
    /// File name without extension; names every media file of the example.
    pub fn stem(&self) -> &str {
        Path::new(&self.file_name).file_stem().and_then(|s| s.to_str()).unwrap_or(&self.file_name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub catalog: ClassCatalog,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn example(&self, id: u64) -> Option<&Example> {
        self.examples.iter().find(|e| e.id == id)
    }

    pub fn ids(&self) -> Vec<u64> {
        self.examples.iter().map(|e| e.id).collect()
    }

    pub fn annotation_count(&self) -> usize {
        self.examples.iter().map(|e| e.annotations.len()).sum()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    width: u32,
    height: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    #[serde(default)]
    area: f64,
    #[serde(default)]
    iscrowd: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

/// Media paths of an example under `root`.
pub fn media_paths(root: &Path, stem: &str) -> (PathBuf, Option<PathBuf>, PathBuf) {
    let rgb = root.join("rgb").join(format!("{stem}.png"));
    let cloud = ["xyzb", "xyz"].iter().map(|ext| root.join("cloud").join(format!("{stem}.{ext}"))).find(|p| p.exists());
    let rgbd = root.join("rgbd").join(format!("{stem}.png"));
    (rgb, cloud, rgbd)
}

/// Parses COCO JSON text. Media existence is checked against `media_root`:
/// every image needs either its RGB-D file or both its RGB image and point cloud.
pub fn parse_coco(text: &str, media_root: &Path) -> Result<Dataset, DatasetError> {
    let coco: CocoFile = serde_json::from_str(text).map_err(|e| DatasetError::MalformedJson(e.to_string()))?;
    let catalog = ClassCatalog::default();
    let mut category_map = HashMap::new();
    for c in &coco.categories {
        let id = catalog.id_of(&c.name).ok_or_else(|| DatasetError::UnknownCategory(c.name.clone()))?;
        category_map.insert(c.id, id);
    }
    let mut examples = Vec::with_capacity(coco.images.len());
    let mut index = HashMap::new();
    for img in &coco.images {
        if index.insert(img.id, examples.len()).is_some() {
            return Err(DatasetError::MalformedJson(format!("duplicate image id {}", img.id)));
        }
        if img.width == 0 || img.height == 0 {
            return Err(DatasetError::MalformedJson(format!("image {} has zero size", img.id)));
        }
        let stem = Path::new(&img.file_name).file_stem().and_then(|s| s.to_str()).unwrap_or(&img.file_name).to_string();
        let (rgb, cloud, rgbd) = media_paths(media_root, &stem);
        if !rgbd.exists() && !(rgb.exists() && cloud.is_some()) {
            return Err(DatasetError::MissingMedia {
                image: img.file_name.clone(),
                msg: format!("need {} or both {} and a cloud/{stem}.xyz[b]", rgbd.display(), rgb.display()),
            });
        }
        examples.push(Example {
            id: img.id,
            file_name: img.file_name.clone(),
            width: img.width,
            height: img.height,
            rgb,
            cloud,
            rgbd,
            annotations: Vec::new(),
        });
    }
    for a in &coco.annotations {
        if a.iscrowd != 0 {
            return Err(DatasetError::CrowdAnnotation(a.id));
        }
        let class_id = *category_map
            .get(&a.category_id)
            .ok_or_else(|| DatasetError::UnknownCategory(format!("category id {}", a.category_id)))?;
        let &ei = index
            .get(&a.image_id)
            .ok_or_else(|| DatasetError::MalformedJson(format!("annotation {} references unknown image {}", a.id, a.image_id)))?;
        let [x, y, w, h] = a.bbox;
        if !(w > 0.0 && h > 0.0) || !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(DatasetError::DegenerateBox { annotation: a.id, msg: format!("width {w}, height {h}") });
        }
        let ex = &mut examples[ei];
        let bbox = BBox::new(x, y, x + w, y + h);
        if bbox.x_min < 0.0 || bbox.y_min < 0.0 || bbox.x_max > ex.width as f64 || bbox.y_max > ex.height as f64 {
            return Err(DatasetError::DegenerateBox {
                annotation: a.id,
                msg: format!("box {:?} leaves the {}x{} image", a.bbox, ex.width, ex.height),
            });
        }
        ex.annotations.push(Annotation { class_id, bbox });
    }
    Ok(Dataset { catalog, examples })
}

pub fn load_coco(json_path: &Path, media_root: &Path) -> Result<Dataset, DatasetError> {
    let text = fs::read_to_string(json_path).map_err(|e| io_err(json_path, e))?;
    parse_coco(&text, media_root)
}

/// COCO JSON for a dataset. Category ids are class ids plus one.
pub fn export_coco(dataset: &Dataset) -> String {
    let mut annotations = Vec::new();
    for ex in &dataset.examples {
        for a in &ex.annotations {
            let b = &a.bbox;
            annotations.push(CocoAnnotation {
                id: annotations.len() as u64 + 1,
                image_id: ex.id,
                category_id: a.class_id as u64 + 1,
                bbox: [b.x_min, b.y_min, b.width(), b.height()],
                area: b.area(),
                iscrowd: 0,
            });
        }
    }
    let coco = CocoFile {
        images: dataset
            .examples
            .iter()
            .map(|e| CocoImage { id: e.id, file_name: e.file_name.clone(), width: e.width, height: e.height })
            .collect(),
        annotations,
        categories: dataset
            .catalog
            .names()
            .iter()
            .enumerate()
            .map(|(i, n)| CocoCategory { id: i as u64 + 1, name: n.clone() })
            .collect(),
    };
    serde_json::to_string_pretty(&coco).expect("COCO serializes")
}

/// Image ids of the three splits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub seed: u64,
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
}

impl DatasetSplit {
    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| DatasetError::MalformedJson(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        fs::write(path, serde_json::to_string_pretty(self).expect("split serializes")).map_err(|e| io_err(path, e))
    }

    pub fn part(&self, name: &str) -> Option<&[u64]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

/// Shuffles `ids` under `seed` and cuts the result into train, val and test, in that order.
pub fn split_ids(ids: &[u64], counts: (usize, usize, usize), seed: u64) -> Result<DatasetSplit, DatasetError> {
    let (n_train, n_val, n_test) = counts;
    if n_train + n_val + n_test != ids.len() {
        return Err(DatasetError::CountMismatch { requested: counts, available: ids.len() });
    }
    let mut order = ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed("dataset-split", seed, 0));
    order.shuffle(&mut rng);
    let test = order.split_off(n_train + n_val);
    let val = order.split_off(n_train);
    Ok(DatasetSplit { seed, train: order, val, test })
}

pub fn split_dataset(dataset: &Dataset, counts: (usize, usize, usize), seed: u64) -> Result<DatasetSplit, DatasetError> {
    split_ids(&dataset.ids(), counts, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassBalance {
    pub counts: Vec<usize>,
    /// Smallest over largest class count; `None` when there are no annotations.
    pub min_max_ratio: Option<f64>,
}

pub fn class_balance(dataset: &Dataset) -> ClassBalance {
    let mut counts = vec![0usize; dataset.catalog.len()];
    for a in dataset.examples.iter().flat_map(|e| &e.annotations) {
        counts[a.class_id] += 1;
    }
    let max = counts.iter().copied().max().unwrap_or(0);
    let min = counts.iter().copied().min().unwrap_or(0);
    let min_max_ratio = (max > 0).then(|| min as f64 / max as f64);
    ClassBalance { counts, min_max_ratio }
}

/// A dataset seen through one model variant: same examples and labels, only
/// the loaded channels differ.
#[derive(Debug, Clone, Copy)]
pub struct VariantView<'a> {
    pub dataset: &'a Dataset,
    pub variant: VariantKind,
}

pub fn derive_variant_dataset(dataset: &Dataset, variant: VariantKind) -> VariantView<'_> {
    VariantView { dataset, variant }
}

impl VariantView<'_> {
    pub fn examples(&self) -> &[Example] {
        &self.dataset.examples
    }

    pub fn class_balance(&self) -> ClassBalance {
        class_balance(self.dataset)
    }

    /// Reads the example's RGB-D image and keeps the variant's channels.
    pub fn load_channels(&self, example: &Example) -> Result<ChannelGrid, DatasetError> {
        Ok(select_channels(&read_rgbd(&example.rgbd)?, self.variant))
    }
}

// ---------------------------------------------------------------------------
// Synthetic scenes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    /// Rectangular prism, yawed about the optical axis.
    Box,
    /// Cylinder whose axis is parallel to the optical axis; `length` is the diameter.
    Cylinder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectTemplate {
    pub class_id: usize,
    pub shape: Shape,
    /// Meters, `[min, max]`.
    pub length: [f64; 2],
    /// Meters, `[min, max]`; ignored for cylinders.
    #[serde(default)]
    pub width: [f64; 2],
    /// Meters above the table, `[min, max]`.
    pub height: [f64; 2],
    pub color: [u8; 3],
    /// Per-object uniform color offset range, applied to all three channels.
    #[serde(default)]
    pub color_jitter: u8,
    /// Cloud points kept per object; `None` keeps every visible pixel.
    #[serde(default)]
    pub points_per_object: Option<usize>,
}

/// Camera looking straight down at a table at `table_distance` meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub intrinsics: CameraIntrinsics,
    /// Depth-sensor to camera transform, row-major 4x4.
    pub extrinsic: Vec<f64>,
    pub table_distance: f64,
    pub background_color: [u8; 3],
    /// Per-pixel uniform noise amplitude on the background color.
    pub background_noise: u8,
    /// Fraction of table pixels that contribute a cloud point.
    pub background_point_fraction: f64,
    /// Standard deviation of additive depth noise, meters.
    pub depth_noise_std: f64,
    /// Inclusive range of the number of objects per scene.
    pub objects_per_scene: [usize; 2],
    /// Minimum gap between object footprints, meters.
    pub min_gap: f64,
    /// Minimum distance of annotations from the image border, pixels.
    pub border_margin: f64,
    pub templates: Vec<ObjectTemplate>,
}

fn template(class_id: usize, shape: Shape, length: [f64; 2], width: [f64; 2], height: [f64; 2], color: [u8; 3]) -> ObjectTemplate {
    ObjectTemplate { class_id, shape, length, width, height, color, color_jitter: 8, points_per_object: None }
}

fn default_extrinsic() -> Vec<f64> {
    RigidTransform::from_axis_angle([0.0, 1.0, 0.0], 0.02, [0.03, -0.01, 0.005])
        .expect("valid default extrinsic")
        .to_row_major()
}

impl Default for SceneConfig {
    fn default() -> Self {
        use Shape::{Box, Cylinder};
        Self {
            intrinsics: CameraIntrinsics { fx: 240.0, fy: 240.0, cx: 80.0, cy: 60.0, width: 160, height: 120 },
            extrinsic: default_extrinsic(),
            table_distance: 0.45,
            background_color: [120, 130, 125],
            background_noise: 6,
            background_point_fraction: 1.0,
            depth_noise_std: 0.0,
            objects_per_scene: [2, 4],
            min_gap: 0.005,
            border_margin: 1.0,
            templates: vec![
                template(0, Cylinder, [0.045, 0.055], [0.0; 2], [0.010, 0.014], [205, 165, 60]),
                template(1, Cylinder, [0.028, 0.034], [0.0; 2], [0.008, 0.012], [215, 175, 70]),
                template(2, Box, [0.030, 0.034], [0.012, 0.014], [0.007, 0.009], [55, 55, 65]),
                template(3, Cylinder, [0.020, 0.024], [0.0; 2], [0.008, 0.010], [160, 160, 170]),
                template(4, Cylinder, [0.024, 0.028], [0.0; 2], [0.035, 0.045], [30, 30, 35]),
                template(5, Box, [0.020, 0.024], [0.008, 0.010], [0.015, 0.020], [185, 45, 40]),
                template(6, Box, [0.032, 0.036], [0.011, 0.013], [0.028, 0.034], [185, 45, 40]),
                template(7, Cylinder, [0.010, 0.012], [0.0; 2], [0.015, 0.020], [45, 120, 200]),
                template(8, Cylinder, [0.015, 0.018], [0.0; 2], [0.028, 0.034], [45, 120, 200]),
            ],
        }
    }
}

impl SceneConfig {
    /// Objects whose colors sit close to the table color, so appearance alone
    /// separates them poorly. Two of the classes share a shape and height and
    /// differ only in a faint tint; the thinnest class keeps few cloud points.
    pub fn low_contrast() -> Self {
        use Shape::{Box, Cylinder};
        let bg = [120, 125, 122];
        let near = |d: [i16; 3]| -> [u8; 3] {
            let mut c = [0u8; 3];
            for i in 0..3 {
                c[i] = (bg[i] as i16 + d[i]) as u8;
            }
            c
        };
        let t = |class_id, shape, length, width, height, d, points| {
            let mut o = template(class_id, shape, length, width, height, near(d));
            o.color_jitter = 3;
            o.points_per_object = points;
            o
        };
        Self {
            background_color: bg,
            background_noise: 4,
            objects_per_scene: [2, 3],
            templates: vec![
                t(0, Cylinder, [0.050, 0.056], [0.0; 2], [0.030, 0.036], [8, 8, 8], None),
                t(3, Cylinder, [0.050, 0.056], [0.0; 2], [0.008, 0.010], [10, 10, 10], None),
                t(5, Box, [0.048, 0.054], [0.024, 0.028], [0.020, 0.024], [30, -6, -6], None),
                t(6, Box, [0.048, 0.054], [0.024, 0.028], [0.020, 0.024], [-6, -6, 30], None),
                t(7, Box, [0.050, 0.056], [0.012, 0.014], [0.004, 0.006], [-10, -10, -10], Some(6)),
            ],
            ..Self::default()
        }
    }

    pub fn calibration(&self) -> Result<CalibrationBundle, DatasetError> {
        Ok(CalibrationBundle::new(self.intrinsics, RigidTransform::from_row_major(&self.extrinsic)?)?)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: String| Err(DatasetError::ConfigInvalid(m));
        self.calibration()?;
        if !(self.table_distance > 0.0 && self.table_distance.is_finite()) {
            return bad("table_distance must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.background_point_fraction) {
            return bad("background_point_fraction must be in [0, 1]".into());
        }
        if !(self.depth_noise_std >= 0.0 && self.depth_noise_std.is_finite()) {
            return bad("depth_noise_std must be non-negative".into());
        }
        if self.objects_per_scene[0] > self.objects_per_scene[1] {
            return bad("objects_per_scene must be [min, max] with min <= max".into());
        }
        if self.objects_per_scene[1] > 0 && self.templates.is_empty() {
            return bad("objects requested but no templates given".into());
        }
        if !(self.min_gap >= 0.0) || !(self.border_margin >= 0.0) {
            return bad("min_gap and border_margin must be non-negative".into());
        }
        for (i, t) in self.templates.iter().enumerate() {
            if t.class_id >= NUM_CLASSES {
                return bad(format!("template {i}: class_id {} >= {NUM_CLASSES}", t.class_id));
            }
            let range_ok = |r: [f64; 2]| r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite();
            if !range_ok(t.length) || !range_ok(t.height) || (t.shape == Shape::Box && !range_ok(t.width)) {
                return bad(format!("template {i}: size ranges must be positive [min, max]"));
            }
            if t.height[1] >= self.table_distance {
                return bad(format!("template {i}: objects must stay below the camera"));
            }
        }
        Ok(())
    }
}

/// One object placed on the table, camera frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacedObject {
    pub class_id: usize,
    pub shape: Shape,
    /// Footprint center on the table plane, meters.
    pub center: [f64; 2],
    pub length: f64,
    pub width: f64,
    pub height: f64,
    /// Rotation about the optical axis, radians.
    pub yaw: f64,
    pub color: [u8; 3],
    pub bbox: BBox,
    pub visible_pixels: usize,
    pub cloud_points: usize,
}

impl PlacedObject {
    fn footprint_radius(&self) -> f64 {
        match self.shape {
            Shape::Box => 0.5 * self.length.hypot(self.width),
            Shape::Cylinder => 0.5 * self.length,
        }
    }
}

/// Exact bounding rectangle of an object's projection, pixel-edge coordinates.
pub fn projected_bbox(obj: &PlacedObject, k: &CameraIntrinsics, table_distance: f64) -> BBox {
    let z_top = table_distance - obj.height;
    let [xc, yc] = obj.center;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for z in [z_top, table_distance] {
        match obj.shape {
            Shape::Box => {
                let (s, c) = obj.yaw.sin_cos();
                for (dx, dy) in [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)] {
                    let lx = dx * obj.length / 2.0;
                    let ly = dy * obj.width / 2.0;
                    let x = xc + c * lx - s * ly;
                    let y = yc + s * lx + c * ly;
                    xs.push(k.fx * x / z + k.cx);
                    ys.push(k.fy * y / z + k.cy);
                }
            }
            Shape::Cylinder => {
                // A circle parallel to the image plane projects to a circle.
                let r = obj.length / 2.0;
                xs.extend([k.fx * (xc - r) / z + k.cx, k.fx * (xc + r) / z + k.cx]);
                ys.extend([k.fy * (yc - r) / z + k.cy, k.fy * (yc + r) / z + k.cy]);
            }
        }
    }
    let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    BBox::new(min(&xs) + 0.5, min(&ys) + 0.5, max(&xs) + 0.5, max(&ys) + 0.5)
}

/// Nearest intersection of the ray `t * dir` (dir has z = 1, so `t` is depth)
/// with the object, plus a flat shading factor of the face hit.
fn intersect(obj: &PlacedObject, dir: [f64; 3], table_distance: f64) -> Option<(f64, f64)> {
    let z_top = table_distance - obj.height;
    let [xc, yc] = obj.center;
    match obj.shape {
        Shape::Box => {
            // Slab test in the object frame; the ray origin is the camera center.
            let (s, c) = obj.yaw.sin_cos();
            let o = [-xc, -yc];
            let to_local = |v: [f64; 2]| [c * v[0] + s * v[1], -s * v[0] + c * v[1]];
            let ol = to_local(o);
            let dl = to_local([dir[0], dir[1]]);
            let origin = [ol[0], ol[1], -(z_top + table_distance) / 2.0];
            let d = [dl[0], dl[1], dir[2]];
            let half = [obj.length / 2.0, obj.width / 2.0, obj.height / 2.0];
            let mut t_enter = f64::NEG_INFINITY;
            let mut t_exit = f64::INFINITY;
            let mut axis = 2;
            for i in 0..3 {
                if d[i].abs() < 1e-15 {
                    if origin[i].abs() > half[i] {
                        return None;
                    }
                    continue;
                }
                let t0 = (-half[i] - origin[i]) / d[i];
                let t1 = (half[i] - origin[i]) / d[i];
                let (lo, hi) = if t0 < t1 { (t0, t1) } else { (t1, t0) };
                if lo > t_enter {
                    t_enter = lo;
                    axis = i;
                }
                t_exit = t_exit.min(hi);
            }
            if t_enter > t_exit || t_enter <= 0.0 {
                return None;
            }
            let shade = [0.72, 0.84, 1.0][axis];
            Some((t_enter, shade))
        }
        Shape::Cylinder => {
            let r = obj.length / 2.0;
            let inside = |t: f64| (t * dir[0] - xc).powi(2) + (t * dir[1] - yc).powi(2) <= r * r;
            if inside(z_top) {
                return Some((z_top, 1.0));
            }
            // Side wall: |t * d_xy - c|^2 = r^2, entering root.
            let a = dir[0] * dir[0] + dir[1] * dir[1];
            if a < 1e-30 {
                return None;
            }
            let b = -2.0 * (dir[0] * xc + dir[1] * yc);
            let cc = xc * xc + yc * yc - r * r;
            let disc = b * b - 4.0 * a * cc;
            if disc < 0.0 {
                return None;
            }
            let t = (-b - disc.sqrt()) / (2.0 * a);
            (t >= z_top && t <= table_distance).then_some((t, 0.78))
        }
    }
}

/// A rendered scene: RGB image, sensor-frame point cloud, annotations and the placed objects.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub rgb: RgbImage,
    pub cloud: PointCloud,
    pub annotations: Vec<Annotation>,
    pub objects: Vec<PlacedObject>,
}

fn sample_range(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..=r[1])
    } else {
        r[0]
    }
}

fn jitter(c: u8, offset: i32) -> u8 {
    (c as i32 + offset).clamp(0, 255) as u8
}

/// Renders one scene. Objects that cannot be placed without overlap within the
/// image are skipped; objects with no visible pixel are dropped.
pub fn generate_synthetic_scene(seed: u64, config: &SceneConfig) -> Result<SyntheticScene, DatasetError> {
    config.validate()?;
    let calib = config.calibration()?;
    let k = config.intrinsics;
    let d_table = config.table_distance;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_objects = rng.random_range(config.objects_per_scene[0]..=config.objects_per_scene[1]);

    let mut objects: Vec<PlacedObject> = Vec::new();
    let half_x = (k.width as f64 / 2.0) / k.fx * d_table;
    let half_y = (k.height as f64 / 2.0) / k.fy * d_table;
    let center_x = (k.width as f64 / 2.0 - k.cx) / k.fx * d_table;
    let center_y = (k.height as f64 / 2.0 - k.cy) / k.fy * d_table;
    let mut object_points: Vec<Option<usize>> = Vec::new();
    for _ in 0..n_objects {
        let t = &config.templates[rng.random_range(0..config.templates.len())];
        for _attempt in 0..200 {
            let length = sample_range(&mut rng, t.length);
            let width = if t.shape == Shape::Box { sample_range(&mut rng, t.width) } else { length };
            let height = sample_range(&mut rng, t.height);
            let yaw = if t.shape == Shape::Box { rng.random_range(0.0..std::f64::consts::PI) } else { 0.0 };
            let center = [center_x + rng.random_range(-half_x..half_x), center_y + rng.random_range(-half_y..half_y)];
            let j = if t.color_jitter > 0 {
                let a = t.color_jitter as i32;
                rng.random_range(-a..=a)
            } else {
                0
            };
            let color = [jitter(t.color[0], j), jitter(t.color[1], j), jitter(t.color[2], j)];
            let mut obj = PlacedObject {
                class_id: t.class_id,
                shape: t.shape,
                center,
                length,
                width,
                height,
                yaw,
                color,
                bbox: BBox::new(0.0, 0.0, 1.0, 1.0),
                visible_pixels: 0,
                cloud_points: 0,
            };
            obj.bbox = projected_bbox(&obj, &k, d_table);
            let m = config.border_margin;
            let inside = obj.bbox.x_min >= m
                && obj.bbox.y_min >= m
                && obj.bbox.x_max <= k.width as f64 - m
                && obj.bbox.y_max <= k.height as f64 - m;
            let clear = objects.iter().all(|o| {
                let dist = (o.center[0] - center[0]).hypot(o.center[1] - center[1]);
                dist > o.footprint_radius() + obj.footprint_radius() + config.min_gap
            });
            if inside && clear {
                objects.push(obj);
                object_points.push(t.points_per_object);
                break;
            }
        }
    }

    // Ray cast every pixel through its center.
    let (w, h) = (k.width as usize, k.height as usize);
    let mut hit_object = vec![usize::MAX; w * h];
    let mut depth = vec![d_table; w * h];
    let mut rgb = RgbImage::new(k.width, k.height);
    let noise = config.background_noise as i32;
    for v in 0..h {
        for u in 0..w {
            let dir = [(u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0];
            let mut best: Option<(f64, f64, usize)> = None;
            for (i, obj) in objects.iter().enumerate() {
                if let Some((t, shade)) = intersect(obj, dir, d_table) {
                    if best.is_none_or(|(bt, _, _)| t < bt) {
                        best = Some((t, shade, i));
                    }
                }
            }
            let idx = v * w + u;
            let px = match best {
                Some((t, shade, i)) => {
                    hit_object[idx] = i;
                    depth[idx] = t;
                    let c = objects[i].color;
                    Rgb([0, 1, 2].map(|ch| (c[ch] as f64 * shade).round().clamp(0.0, 255.0) as u8))
                }
                None => {
                    let n = if noise > 0 { rng.random_range(-noise..=noise) } else { 0 };
                    let c = config.background_color;
                    Rgb([jitter(c[0], n), jitter(c[1], n), jitter(c[2], n)])
                }
            };
            rgb.put_pixel(u as u32, v as u32, px);
        }
    }

    // Choose which pixels return a cloud point.
    let mut per_object: Vec<Vec<usize>> = vec![Vec::new(); objects.len()];
    let mut keep = vec![false; w * h];
    for (idx, &o) in hit_object.iter().enumerate() {
        if o == usize::MAX {
            keep[idx] = config.background_point_fraction >= 1.0 || rng.random::<f64>() < config.background_point_fraction;
        } else {
            per_object[o].push(idx);
        }
    }
    for (i, pixels) in per_object.iter().enumerate() {
        objects[i].visible_pixels = pixels.len();
        let chosen: Vec<usize> = match object_points[i] {
            Some(budget) if budget < pixels.len() => {
                let mut picked: Vec<usize> =
                    rand::seq::index::sample(&mut rng, pixels.len(), budget).into_iter().map(|j| pixels[j]).collect();
                picked.sort_unstable();
                picked
            }
            _ => pixels.clone(),
        };
        objects[i].cloud_points = chosen.len();
        for idx in chosen {
            keep[idx] = true;
        }
    }

    let noise_dist = (config.depth_noise_std > 0.0).then(|| Normal::new(0.0, config.depth_noise_std).expect("valid std"));
    let to_sensor = calib.extrinsics.inverse();
    let mut points = Vec::new();
    for (idx, &kept) in keep.iter().enumerate() {
        if !kept {
            continue;
        }
        let (u, v) = ((idx % w) as f64, (idx / w) as f64);
        let mut z = depth[idx];
        if let Some(nd) = &noise_dist {
            z = (z + nd.sample(&mut rng)).max(1e-3);
        }
        points.push(to_sensor.apply(k.back_project(u, v, z)));
    }

    let visible: Vec<PlacedObject> = objects.into_iter().filter(|o| o.visible_pixels > 0).collect();
    let annotations = visible.iter().map(|o| Annotation { class_id: o.class_id, bbox: o.bbox }).collect();
    Ok(SyntheticScene { rgb, cloud: PointCloud::new(points), annotations, objects: visible })
}

/// Per-scene ground truth recorded by the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: u64,
    pub file_name: String,
    pub seed: u64,
    pub objects: Vec<PlacedObject>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub seed: u64,
    pub config: SceneConfig,
    pub scenes: Vec<ManifestEntry>,
}

impl SynthManifest {
    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| DatasetError::MalformedJson(e.to_string()))
    }

    pub fn annotation_count(&self) -> usize {
        self.scenes.iter().map(|s| s.objects.len()).sum()
    }
}

/// Scene file stem for a 0-based index.
pub fn scene_stem(index: usize) -> String {
    format!("scene_{:06}", index + 1)
}

/// Generates `n` scenes under `out`: `rgb/`, `cloud/` (binary clouds),
/// `annotations.json` (COCO), `manifest.json` and `calibration.json`.
/// Scene `i` uses seed `derive_seed("synthetic-scene", seed, i)`.
pub fn generate_fixture_dataset(config: &SceneConfig, seed: u64, n: usize, out: &Path) -> Result<Dataset, DatasetError> {
    config.validate()?;
    for dir in ["rgb", "cloud"] {
        let p = out.join(dir);
        fs::create_dir_all(&p).map_err(|e| io_err(&p, e))?;
    }
    let scenes: Vec<(ManifestEntry, Example)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let scene_seed = derive_seed("synthetic-scene", seed, i as u64);
            let scene = generate_synthetic_scene(scene_seed, config)?;
            let stem = scene_stem(i);
            let rgb_path = out.join("rgb").join(format!("{stem}.png"));
            scene.rgb.save(&rgb_path).map_err(|e| io_err(&rgb_path, e))?;
            let cloud_path = out.join("cloud").join(format!("{stem}.xyzb"));
            scene.cloud.write_xyzb(&cloud_path)?;
            let file_name = format!("{stem}.png");
            let example = Example {
                id: i as u64 + 1,
                file_name: file_name.clone(),
                width: config.intrinsics.width,
                height: config.intrinsics.height,
                rgb: rgb_path,
                cloud: Some(cloud_path),
                rgbd: out.join("rgbd").join(format!("{stem}.png")),
                annotations: scene.annotations,
            };
            Ok((ManifestEntry { id: i as u64 + 1, file_name, seed: scene_seed, objects: scene.objects }, example))
        })
        .collect::<Result<_, DatasetError>>()?;
    let (entries, examples): (Vec<_>, Vec<_>) = scenes.into_iter().unzip();
    let dataset = Dataset { catalog: ClassCatalog::default(), examples };
    let write = |name: &str, text: String| {
        let p = out.join(name);
        fs::write(&p, text).map_err(|e| io_err(&p, e))
    };
    write("annotations.json", export_coco(&dataset))?;
    let manifest = SynthManifest { seed, config: config.clone(), scenes: entries };
    write("manifest.json", serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
    write("calibration.json", config.calibration()?.to_json())?;
    Ok(dataset)
}

/// Per-class annotation counts from the generator manifest, for cross-checks.
pub fn manifest_class_counts(manifest: &SynthManifest) -> BTreeMap<usize, usize> {
    let mut counts = BTreeMap::new();
    for o in manifest.scenes.iter().flat_map(|s| &s.objects) {
        *counts.entry(o.class_id).or_insert(0) += 1;
    }
    counts
}

/// True when the three id lists are pairwise disjoint and cover `ids` exactly.
pub fn split_is_partition(split: &DatasetSplit, ids: &[u64]) -> bool {
    let all: Vec<u64> = split.train.iter().chain(&split.val).chain(&split.test).copied().collect();
    let set: HashSet<u64> = all.iter().copied().collect();
    set.len() == all.len() && set.len() == ids.len() && ids.iter().all(|i| set.contains(i))
}
