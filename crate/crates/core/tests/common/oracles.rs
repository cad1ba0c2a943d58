//! Independent reference implementations used by several test targets.
#![allow(dead_code)]

use nalgebra::{Matrix4, Vector4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rgbd_fusion::calib::CalibrationBundle;
use rgbd_fusion::detect::{encode_box, iou, AnchorLabel, BBox};

/// Homogeneous projection with an independent linear algebra library:
/// `K [I|0] T p`, then divide by the third coordinate.
pub fn nalgebra_projection(p: [f64; 3], calib: &CalibrationBundle) -> Option<(f64, f64, f64)> {
    let t = Matrix4::from_row_slice(&calib.extrinsics.to_row_major());
    let k = &calib.intrinsics;
    let kp = Matrix4::new(k.fx, 0.0, k.cx, 0.0, 0.0, k.fy, k.cy, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let h = kp * t * Vector4::new(p[0], p[1], p[2], 1.0);
    let z = (t * Vector4::new(p[0], p[1], p[2], 1.0))[2];
    (z > 1e-6).then(|| (h[0] / h[2], h[1] / h[2], z))
}

pub fn int_box(rng: &mut ChaCha8Rng, extent: i32) -> BBox {
    let x0 = rng.random_range(0..extent - 1);
    let y0 = rng.random_range(0..extent - 1);
    let x1 = rng.random_range(x0 + 1..=extent);
    let y1 = rng.random_range(y0 + 1..=extent);
    BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64)
}

pub fn covers(b: &BBox, x: i32, y: i32) -> bool {
    let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
    cx > b.x_min && cx < b.x_max && cy > b.y_min && cy < b.y_max
}

pub fn pixel_iou(a: &BBox, b: &BBox, extent: i32) -> f64 {
    let (mut inter, mut union) = (0u32, 0u32);
    for y in 0..extent {
        for x in 0..extent {
            let (ia, ib) = (covers(a, x, y), covers(b, x, y));
            inter += (ia && ib) as u32;
            union += (ia || ib) as u32;
        }
    }
    inter as f64 / union as f64
}

/// Straight transcription of the greedy rule with a boolean suppression table.
pub fn nms_oracle(boxes: &[BBox], scores: &[f64], classes: &[usize], thr: f64) -> Vec<usize> {
    let n = boxes.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut removed = vec![false; n];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if removed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if classes[i] == classes[j] && iou(&boxes[i], &boxes[j]) > thr {
                removed[j] = true;
            }
        }
    }
    keep
}

pub fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<BBox>, Vec<f64>, Vec<usize>) {
    let n = rng.random_range(0..60);
    let boxes: Vec<BBox> = (0..n)
        .map(|_| {
            let x: f64 = rng.random_range(0.0..80.0);
            let y: f64 = rng.random_range(0.0..80.0);
            BBox::new(x, y, x + rng.random_range(4.0..30.0), y + rng.random_range(4.0..30.0))
        })
        .collect();
    let scores = (0..n).map(|_| (rng.random_range(0..20) as f64) / 20.0).collect();
    let classes = (0..n).map(|_| rng.random_range(0..3)).collect();
    (boxes, scores, classes)
}

/// Exhaustive restatement of the labeling rule.
pub fn assign_oracle(anchors: &[BBox], gts: &[BBox], classes: &[usize], pos: f64, neg: f64) -> Vec<AnchorLabel> {
    let mut labels = Vec::new();
    for (a, anchor) in anchors.iter().enumerate() {
        if gts.is_empty() {
            labels.push(AnchorLabel::Negative);
            continue;
        }
        // ground-truth boxes whose unique best anchor (lowest index among ties, IoU > 0) is `a`
        let forced = (0..gts.len()).find(|&g| {
            let best = anchors.iter().map(|x| iou(x, &gts[g])).fold(0.0, f64::max);
            best > 0.0 && (0..anchors.len()).find(|&i| iou(&anchors[i], &gts[g]) == best) == Some(a)
        });
        let ious: Vec<f64> = gts.iter().map(|g| iou(anchor, g)).collect();
        let best = ious.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let best_g = ious.iter().position(|&v| v == best).unwrap();
        let g = match forced {
            Some(g) => g,
            None if best >= pos => best_g,
            None if best < neg => {
                labels.push(AnchorLabel::Negative);
                continue;
            }
            None => {
                labels.push(AnchorLabel::Ignore);
                continue;
            }
        };
        labels.push(AnchorLabel::Positive { gt_index: g, class_id: classes[g], delta: encode_box(&gts[g], anchor).unwrap() });
    }
    labels
}

/// Two-pass mean and population standard deviation.
pub fn moments(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (mean, (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt())
}
