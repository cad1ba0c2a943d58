//! Box geometry for the detector: anchors, IoU, delta coding, target assignment and NMS.

use serde::{Deserialize, Serialize};

use super::DetectError;

/// Axis-aligned box in pixels, corner form. A box covers `[x_min, x_max) x [y_min, y_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

/// Anchors are plain boxes that may extend past the image border.
pub type Anchor = BBox;

impl BBox {
    pub const fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self { x_min, y_min, x_max, y_max }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    pub fn is_valid(&self) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max && [self.x_min, self.y_min, self.x_max, self.y_max].iter().all(|v| v.is_finite())
    }

    pub fn clip(&self, width: f64, height: f64) -> Self {
        Self::new(
            self.x_min.clamp(0.0, width),
            self.y_min.clamp(0.0, height),
            self.x_max.clamp(0.0, width),
            self.y_max.clamp(0.0, height),
        )
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self::new(self.x_min * factor, self.y_min * factor, self.x_max * factor, self.y_max * factor)
    }
}

/// Regression targets relative to a reference box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxDelta {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl BoxDelta {
    pub fn to_array(self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self { tx: a[0], ty: a[1], tw: a[2], th: a[3] }
    }
}

/// Upper bound on decoded log-scale, `ln(1000 / 16)`; keeps `exp` finite for wild predictions.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356;

/// Anchors tiled over a feature grid. Ordering: cells row-major, then scale, then ratio.
/// `ratio` is height / width and every anchor of scale `s` has area `s^2`.
pub fn generate_anchors(feature_w: usize, feature_h: usize, stride: f64, scales: &[f64], ratios: &[f64]) -> Vec<Anchor> {
    let mut shapes = Vec::with_capacity(scales.len() * ratios.len());
    for &s in scales {
        for &r in ratios {
            let w = s / r.sqrt();
            let h = s * r.sqrt();
            shapes.push((w, h));
        }
    }
    let mut out = Vec::with_capacity(feature_w * feature_h * shapes.len());
    for y in 0..feature_h {
        for x in 0..feature_w {
            let cx = (x as f64 + 0.5) * stride;
            let cy = (y as f64 + 0.5) * stride;
            out.extend(shapes.iter().map(|&(w, h)| BBox::from_center(cx, cy, w, h)));
        }
    }
    out
}

/// Intersection over union; 0 when the boxes do not overlap.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = a.x_max.min(b.x_max) - a.x_min.max(b.x_min);
    let ih = a.y_max.min(b.y_max) - a.y_min.max(b.y_min);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn encode_box(gt: &BBox, reference: &BBox) -> Result<BoxDelta, DetectError> {
    if !(gt.width() > 0.0 && gt.height() > 0.0 && reference.width() > 0.0 && reference.height() > 0.0) {
        return Err(DetectError::NonPositiveSize);
    }
    let (gx, gy) = gt.center();
    let (ax, ay) = reference.center();
    let (aw, ah) = (reference.width(), reference.height());
    Ok(BoxDelta {
        tx: (gx - ax) / aw,
        ty: (gy - ay) / ah,
        tw: (gt.width() / aw).ln(),
        th: (gt.height() / ah).ln(),
    })
}

/// Exact inverse of [`encode_box`].
pub fn decode_box(delta: &BoxDelta, reference: &BBox) -> Result<BBox, DetectError> {
    if !(reference.width() > 0.0 && reference.height() > 0.0) {
        return Err(DetectError::NonPositiveSize);
    }
    Ok(decode_with_limit(delta, reference, f64::INFINITY))
}

/// Decoding with the log-scale clamp, for network outputs.
pub(crate) fn decode_clamped(delta: &BoxDelta, reference: &BBox) -> BBox {
    decode_with_limit(delta, reference, MAX_LOG_SCALE)
}

fn decode_with_limit(delta: &BoxDelta, reference: &BBox, max_log_scale: f64) -> BBox {
    let (ax, ay) = reference.center();
    let (aw, ah) = (reference.width(), reference.height());
    let cx = ax + delta.tx * aw;
    let cy = ay + delta.ty * ah;
    let w = aw * delta.tw.min(max_log_scale).exp();
    let h = ah * delta.th.min(max_log_scale).exp();
    BBox::from_center(cx, cy, w, h)
}

/// Per-anchor training label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnchorLabel {
    Positive { gt_index: usize, class_id: usize, delta: BoxDelta },
    Negative,
    Ignore,
}

impl AnchorLabel {
    pub fn is_positive(&self) -> bool {
        matches!(self, AnchorLabel::Positive { .. })
    }
}

/// Labels anchors against ground truth.
///
/// An anchor is positive when its best IoU reaches `pos_iou`, or when it is the
/// best anchor for some ground-truth box (lowest anchor index on ties, and only
/// if that IoU is above zero). Forced anchors take the ground truth that forced
/// them (lowest such index); other positives take their best ground truth
/// (lowest index on ties). Remaining anchors are negative below `neg_iou` and
/// ignored otherwise.
pub fn assign_targets(
    anchors: &[Anchor],
    gt_boxes: &[BBox],
    gt_classes: &[usize],
    pos_iou: f64,
    neg_iou: f64,
) -> Vec<AnchorLabel> {
    assert_eq!(gt_boxes.len(), gt_classes.len(), "one class per ground-truth box");
    if gt_boxes.is_empty() {
        return vec![AnchorLabel::Negative; anchors.len()];
    }
    let ious: Vec<Vec<f64>> = anchors.iter().map(|a| gt_boxes.iter().map(|g| iou(a, g)).collect()).collect();

    let mut forced: Vec<Option<usize>> = vec![None; anchors.len()];
    for g in 0..gt_boxes.len() {
        let mut best: Option<(usize, f64)> = None;
        for (a, row) in ious.iter().enumerate() {
            if row[g] > best.map_or(0.0, |b| b.1) {
                best = Some((a, row[g]));
            }
        }
        if let Some((a, _)) = best {
            forced[a].get_or_insert(g);
        }
    }

    anchors
        .iter()
        .zip(&ious)
        .zip(&forced)
        .map(|((anchor, row), forced)| {
            let (best_g, best_iou) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (g, &v)| if v > acc.1 { (g, v) } else { acc });
            let gt_index = match forced {
                Some(g) => *g,
                None if best_iou >= pos_iou => best_g,
                None if best_iou < neg_iou => return AnchorLabel::Negative,
                None => return AnchorLabel::Ignore,
            };
            let delta = encode_box(&gt_boxes[gt_index], anchor).expect("anchors and ground truth have positive size");
            AnchorLabel::Positive { gt_index, class_id: gt_classes[gt_index], delta }
        })
        .collect()
}

/// A scored, classified box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

/// Greedy class-wise NMS. Returns indices of kept boxes ordered by descending
/// score (lower index first on ties). A box is dropped when its IoU with an
/// already kept box of the same class exceeds `iou_threshold`.
pub fn nms_indices(boxes: &[BBox], scores: &[f64], classes: &[usize], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let suppressed = kept
            .iter()
            .any(|&k| classes[k] == classes[i] && iou(&boxes[k], &boxes[i]) > iou_threshold);
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}

pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let boxes: Vec<BBox> = detections.iter().map(|d| d.bbox).collect();
    let scores: Vec<f64> = detections.iter().map(|d| d.score).collect();
    let classes: Vec<usize> = detections.iter().map(|d| d.class_id).collect();
    nms_indices(&boxes, &scores, &classes, iou_threshold).into_iter().map(|i| detections[i]).collect()
}
