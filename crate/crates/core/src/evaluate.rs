//! Detection metrics: greedy IoU matching, per-class AP, mAP@0.5, Mean Precision,
//! multi-run aggregation and the variant comparison report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::{iou, BBox, Detection, Targets};
use crate::fusion::VariantKind;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("class has no ground truth")]
    NoGroundTruth,
    #[error("no class has ground truth")]
    NoClasses,
    #[error("no runs to aggregate")]
    EmptyRuns,
    #[error("comparison needs at least two variants")]
    TooFewVariants,
    #[error("baseline {0} has a mean of zero")]
    DivisionByZero(String),
    #[error("prediction count {preds} does not match ground-truth count {gts}")]
    LengthMismatch { preds: usize, gts: usize },
    #[error("io error on {path}: {msg}")]
    Io { path: String, msg: String },
}

/// How the precision/recall curve is sampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApInterpolation {
    /// Recall levels 0, 0.01, ..., 1.00.
    #[default]
    Coco101,
    /// Recall levels 0, 0.1, ..., 1.0.
    Pascal11,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub iou_threshold: f64,
    /// Score cut-off for Mean Precision.
    pub precision_score_threshold: f64,
    pub interpolation: ApInterpolation,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { iou_threshold: 0.5, precision_score_threshold: 0.5, interpolation: ApInterpolation::Coco101 }
    }
}

/// Outcome of matching one image's detections of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Per detection (input order): the matched ground-truth index, `None` for a false positive.
    pub detection_matches: Vec<Option<usize>>,
    /// Per ground truth: the detection that claimed it.
    pub gt_matches: Vec<Option<usize>>,
}

impl MatchResult {
    pub fn true_positives(&self) -> usize {
        self.detection_matches.iter().filter(|m| m.is_some()).count()
    }
}

/// Visits `scores` in descending order, lower index first on ties.
fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy matching: each detection, best score first, takes the unmatched ground
/// truth with the highest IoU (lowest index on ties) if that IoU reaches the threshold.
pub fn match_detections(detections: &[Detection], gt_boxes: &[BBox], iou_threshold: f64) -> MatchResult {
    let scores: Vec<f64> = detections.iter().map(|d| d.score).collect();
    let mut detection_matches = vec![None; detections.len()];
    let mut gt_matches = vec![None; gt_boxes.len()];
    for d in rank_by_score(&scores) {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gt_boxes.iter().enumerate() {
            if gt_matches[g].is_some() {
                continue;
            }
            let v = iou(&detections[d].bbox, gt);
            if v >= iou_threshold && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            detection_matches[d] = Some(g);
            gt_matches[g] = Some(d);
        }
    }
    MatchResult { detection_matches, gt_matches }
}

/// A detection's score and whether it was a true positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredFlag {
    pub score: f64,
    pub true_positive: bool,
}

/// Interpolated average precision of one class.
pub fn average_precision(flags: &[ScoredFlag], gt_count: usize, interpolation: ApInterpolation) -> Result<f64, EvalError> {
    if gt_count == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    let scores: Vec<f64> = flags.iter().map(|f| f.score).collect();
    let mut precision = Vec::with_capacity(flags.len());
    let mut recall = Vec::with_capacity(flags.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for i in rank_by_score(&scores) {
        if flags[i].true_positive {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / gt_count as f64);
    }
    // precision envelope: max precision at any recall to the right
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let levels: usize = match interpolation {
        ApInterpolation::Coco101 => 100,
        ApInterpolation::Pascal11 => 10,
    };
    let mut sum = 0.0;
    for step in 0..=levels {
        let r = step as f64 / levels as f64;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    Ok(sum / (levels + 1) as f64)
}

/// Unweighted mean of per-class APs.
pub fn mean_ap(per_class: &[f64]) -> Result<f64, EvalError> {
    if per_class.is_empty() {
        return Err(EvalError::NoClasses);
    }
    Ok(per_class.iter().sum::<f64>() / per_class.len() as f64)
}

/// Class-averaged precision `TP / (TP + FP)` over detections scoring at least
/// `score_threshold`. Classes with ground truth but no such detections count 0;
/// classes without ground truth are skipped.
pub fn mean_precision(
    predictions: &[Vec<Detection>],
    ground_truth: &[Targets],
    num_classes: usize,
    score_threshold: f64,
    iou_threshold: f64,
) -> Result<f64, EvalError> {
    Ok(precision_by_class(predictions, ground_truth, num_classes, score_threshold, iou_threshold)?.1)
}

fn precision_by_class(
    predictions: &[Vec<Detection>],
    ground_truth: &[Targets],
    num_classes: usize,
    score_threshold: f64,
    iou_threshold: f64,
) -> Result<(Vec<Option<f64>>, f64), EvalError> {
    if predictions.len() != ground_truth.len() {
        return Err(EvalError::LengthMismatch { preds: predictions.len(), gts: ground_truth.len() });
    }
    let mut tp = vec![0usize; num_classes];
    let mut n_pred = vec![0usize; num_classes];
    let mut n_gt = vec![0usize; num_classes];
    for (preds, gt) in predictions.iter().zip(ground_truth) {
        for c in 0..num_classes {
            let dets: Vec<Detection> =
                preds.iter().filter(|d| d.class_id == c && d.score >= score_threshold).copied().collect();
            let gts: Vec<BBox> = gt.boxes.iter().zip(&gt.classes).filter(|(_, k)| **k == c).map(|(b, _)| *b).collect();
            n_gt[c] += gts.len();
            n_pred[c] += dets.len();
            tp[c] += match_detections(&dets, &gts, iou_threshold).true_positives();
        }
    }
    let per_class: Vec<Option<f64>> = (0..num_classes)
        .map(|c| (n_gt[c] > 0).then(|| if n_pred[c] == 0 { 0.0 } else { tp[c] as f64 / n_pred[c] as f64 }))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = mean_ap(&present)?;
    Ok((per_class, mean))
}

/// Metrics of one evaluated split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Per class; `None` when the class has no ground truth in the split.
    pub per_class_ap: Vec<Option<f64>>,
    pub per_class_precision: Vec<Option<f64>>,
    pub map_50: f64,
    pub mean_precision: f64,
    pub images: usize,
    pub ground_truth: usize,
    pub detections: usize,
}

impl EvalReport {
    pub fn metrics(&self) -> RunMetrics {
        RunMetrics { map_50: self.map_50, mean_precision: self.mean_precision }
    }
}

/// Evaluates per-image predictions against per-image ground truth.
pub fn evaluate_split(
    predictions: &[Vec<Detection>],
    ground_truth: &[Targets],
    num_classes: usize,
    opts: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    if predictions.len() != ground_truth.len() {
        return Err(EvalError::LengthMismatch { preds: predictions.len(), gts: ground_truth.len() });
    }
    let mut flags: Vec<Vec<ScoredFlag>> = vec![Vec::new(); num_classes];
    let mut n_gt = vec![0usize; num_classes];
    for (preds, gt) in predictions.iter().zip(ground_truth) {
        for c in 0..num_classes {
            let dets: Vec<Detection> = preds.iter().filter(|d| d.class_id == c).copied().collect();
            let gts: Vec<BBox> = gt.boxes.iter().zip(&gt.classes).filter(|(_, k)| **k == c).map(|(b, _)| *b).collect();
            n_gt[c] += gts.len();
            let m = match_detections(&dets, &gts, opts.iou_threshold);
            flags[c].extend(
                dets.iter()
                    .zip(&m.detection_matches)
                    .map(|(d, hit)| ScoredFlag { score: d.score, true_positive: hit.is_some() }),
            );
        }
    }
    let per_class_ap: Vec<Option<f64>> = (0..num_classes)
        .map(|c| average_precision(&flags[c], n_gt[c], opts.interpolation).ok())
        .collect();
    let present: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    let map_50 = mean_ap(&present)?;
    let (per_class_precision, mean_precision) = precision_by_class(
        predictions,
        ground_truth,
        num_classes,
        opts.precision_score_threshold,
        opts.iou_threshold,
    )?;
    Ok(EvalReport {
        per_class_ap,
        per_class_precision,
        map_50,
        mean_precision,
        images: predictions.len(),
        ground_truth: n_gt.iter().sum(),
        detections: predictions.iter().map(|p| p.len()).sum(),
    })
}

/// Final test metrics of one training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub map_50: f64,
    pub mean_precision: f64,
}

/// Mean and population standard deviation of each metric over runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunAggregate {
    pub n_runs: usize,
    pub map_mean: f64,
    pub map_std: f64,
    pub mean_precision_mean: f64,
    pub mean_precision_std: f64,
}

/// Moments around the first value; a constant sequence gives exactly that value and 0.
fn moments(values: &[f64]) -> (f64, f64) {
    let origin = values[0];
    let n = values.len() as f64;
    let shift = values.iter().map(|v| v - origin).sum::<f64>() / n;
    let var = values.iter().map(|v| (v - origin - shift).powi(2)).sum::<f64>() / n;
    (origin + shift, var.sqrt())
}

pub fn aggregate_runs(runs: &[RunMetrics]) -> Result<RunAggregate, EvalError> {
    if runs.is_empty() {
        return Err(EvalError::EmptyRuns);
    }
    let maps: Vec<f64> = runs.iter().map(|r| r.map_50).collect();
    let precisions: Vec<f64> = runs.iter().map(|r| r.mean_precision).collect();
    let (map_mean, map_std) = moments(&maps);
    let (mean_precision_mean, mean_precision_std) = moments(&precisions);
    Ok(RunAggregate { n_runs: runs.len(), map_mean, map_std, mean_precision_mean, mean_precision_std })
}

/// `100 (a - b) / b` rounded to one decimal, half away from zero.
pub fn relative_improvement(a: f64, b: f64) -> Option<f64> {
    if b == 0.0 {
        return None;
    }
    Some((1000.0 * (a - b) / b).round() / 10.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub variant: VariantKind,
    pub aggregate: RunAggregate,
}

/// Relative improvement of `variant` over `baseline`, percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDelta {
    pub variant: VariantKind,
    pub baseline: VariantKind,
    pub map_percent: f64,
    pub mean_precision_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ReportRow>,
    pub deltas: Vec<ReportDelta>,
}

/// Rows in Depth-only, RGB-only, RGB-D order; a delta for every later variant against every earlier one.
pub fn comparison_report(aggregates: &BTreeMap<VariantKind, RunAggregate>) -> Result<ComparisonReport, EvalError> {
    if aggregates.len() < 2 {
        return Err(EvalError::TooFewVariants);
    }
    let rows: Vec<ReportRow> = aggregates.iter().map(|(v, a)| ReportRow { variant: *v, aggregate: *a }).collect();
    let mut deltas = Vec::new();
    for (j, row) in rows.iter().enumerate() {
        for base in &rows[..j] {
            let zero = || EvalError::DivisionByZero(base.variant.display_name().to_string());
            deltas.push(ReportDelta {
                variant: row.variant,
                baseline: base.variant,
                map_percent: relative_improvement(row.aggregate.map_mean, base.aggregate.map_mean).ok_or_else(zero)?,
                mean_precision_percent: relative_improvement(
                    row.aggregate.mean_precision_mean,
                    base.aggregate.mean_precision_mean,
                )
                .ok_or_else(zero)?,
            });
        }
    }
    Ok(ComparisonReport { rows, deltas })
}

impl ComparisonReport {
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        s.push_str("| Model | Mean mAP | mAP std | Mean Precision | Mean Precision std | Runs |\n");
        s.push_str("|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let a = &r.aggregate;
            let _ = writeln!(
                s,
                "| {} | {:.3} | {:.3} | {:.3} | {:.3} | {} |",
                r.variant.display_name(),
                a.map_mean,
                a.map_std,
                a.mean_precision_mean,
                a.mean_precision_std,
                a.n_runs
            );
        }
        s.push_str("\n| Comparison | mAP change | Mean Precision change |\n|---|---|---|\n");
        for d in &self.deltas {
            let _ = writeln!(
                s,
                "| {} vs {} | {:+.1}% | {:+.1}% |",
                d.variant.display_name(),
                d.baseline.display_name(),
                d.map_percent,
                d.mean_precision_percent
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,n_runs,map_mean,map_std,mean_precision_mean,mean_precision_std\n");
        for r in &self.rows {
            let a = &r.aggregate;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.variant, a.n_runs, a.map_mean, a.map_std, a.mean_precision_mean, a.mean_precision_std
            );
        }
        s.push_str("\nvariant,baseline,map_percent,mean_precision_percent\n");
        for d in &self.deltas {
            let _ = writeln!(s, "{},{},{:.1},{:.1}", d.variant, d.baseline, d.map_percent, d.mean_precision_percent);
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// One entry of a COCO results array. `category_id` is the 0-based class id plus one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoResult {
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
    pub score: f64,
}

impl CocoResult {
    pub fn from_detection(image_id: u64, d: &Detection) -> Self {
        let b = d.bbox;
        Self { image_id, category_id: d.class_id as u64 + 1, bbox: [b.x_min, b.y_min, b.width(), b.height()], score: d.score }
    }

    pub fn to_detection(&self) -> Detection {
        let [x, y, w, h] = self.bbox;
        Detection { bbox: BBox::new(x, y, x + w, y + h), class_id: self.category_id.saturating_sub(1) as usize, score: self.score }
    }
}

pub fn write_coco_results(results: &[CocoResult], path: &Path) -> Result<(), EvalError> {
    let text = serde_json::to_string_pretty(results).expect("results serialize");
    fs::write(path, text).map_err(|e| EvalError::Io { path: path.display().to_string(), msg: e.to_string() })
}

pub fn read_coco_results(path: &Path) -> Result<Vec<CocoResult>, EvalError> {
    let io = |msg: String| EvalError::Io { path: path.display().to_string(), msg };
    let text = fs::read_to_string(path).map_err(|e| io(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| io(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(b: BBox, score: f64) -> Detection {
        Detection { bbox: b, class_id: 0, score }
    }

    fn flag(score: f64, tp: bool) -> ScoredFlag {
        ScoredFlag { score, true_positive: tp }
    }

    const B: BBox = BBox::new(10.0, 10.0, 20.0, 20.0);

    #[test]
    fn exact_match_is_tp() {
        let m = match_detections(&[det(B, 0.9)], &[B], 0.5);
        assert_eq!(m.detection_matches, vec![Some(0)]);
        assert_eq!(m.gt_matches, vec![Some(0)]);
    }

    #[test]
    fn duplicate_detection_is_fp() {
        let m = match_detections(&[det(B, 0.6), det(B, 0.9)], &[B], 0.5);
        assert_eq!(m.detection_matches, vec![None, Some(0)]);
        assert_eq!(m.true_positives(), 1);
    }

    #[test]
    fn ap_trivial_cases() {
        assert_eq!(average_precision(&[flag(0.9, true)], 1, ApInterpolation::Coco101).unwrap(), 1.0);
        assert_eq!(average_precision(&[flag(0.9, false)], 1, ApInterpolation::Coco101).unwrap(), 0.0);
        assert_eq!(average_precision(&[], 3, ApInterpolation::Coco101).unwrap(), 0.0);
        assert!(matches!(average_precision(&[], 0, ApInterpolation::Coco101), Err(EvalError::NoGroundTruth)));
    }

    #[test]
    fn ap_tp_fp_tp_hand_table() {
        // ranks: TP (p=1, r=.5), FP (p=.5, r=.5), TP (p=2/3, r=1)
        // envelope: 1, 2/3, 2/3 -> recall 0..=0.5 (51 levels) at 1, 0.51..=1 (50 levels) at 2/3
        let flags = [flag(0.9, true), flag(0.8, false), flag(0.7, true)];
        let ap = average_precision(&flags, 2, ApInterpolation::Coco101).unwrap();
        let expected = (51.0 * 1.0 + 50.0 * (2.0 / 3.0)) / 101.0;
        assert!((ap - expected).abs() < 1e-15);
        let ap11 = average_precision(&flags, 2, ApInterpolation::Pascal11).unwrap();
        assert!((ap11 - (6.0 + 5.0 * 2.0 / 3.0) / 11.0).abs() < 1e-15);
    }

    #[test]
    fn mean_ap_examples() {
        assert_eq!(mean_ap(&[0.7]).unwrap(), 0.7);
        assert!(matches!(mean_ap(&[]), Err(EvalError::NoClasses)));
    }

    #[test]
    fn mean_precision_perfect_and_missing_class() {
        let gt = vec![Targets { boxes: vec![B, BBox::new(30.0, 30.0, 40.0, 40.0)], classes: vec![0, 1] }];
        let perfect = vec![vec![det(B, 0.9), Detection { bbox: gt[0].boxes[1], class_id: 1, score: 0.8 }]];
        assert_eq!(mean_precision(&perfect, &gt, 9, 0.5, 0.5).unwrap(), 1.0);
        // class 1 has no detection above threshold -> precision 0
        let partial = vec![vec![det(B, 0.9), Detection { bbox: gt[0].boxes[1], class_id: 1, score: 0.2 }]];
        assert_eq!(mean_precision(&partial, &gt, 9, 0.5, 0.5).unwrap(), 0.5);
        assert!(matches!(mean_precision(&[vec![]], &[Targets::default()], 9, 0.5, 0.5), Err(EvalError::NoClasses)));
    }

    #[test]
    fn aggregate_examples() {
        let same: Vec<RunMetrics> = (0..10).map(|_| RunMetrics { map_50: 0.48, mean_precision: 0.1 + 0.2 }).collect();
        let a = aggregate_runs(&same).unwrap();
        assert_eq!((a.map_mean, a.map_std, a.mean_precision_std), (0.48, 0.0, 0.0));
        let two = [RunMetrics { map_50: 0.4, mean_precision: 0.4 }, RunMetrics { map_50: 0.6, mean_precision: 0.6 }];
        let a = aggregate_runs(&two).unwrap();
        assert!((a.map_mean - 0.5).abs() < 1e-15 && (a.map_std - 0.1).abs() < 1e-15);
        assert!(matches!(aggregate_runs(&[]), Err(EvalError::EmptyRuns)));
    }

    #[test]
    fn report_needs_two_nonzero_baselines() {
        let agg = |m: f64| RunAggregate { n_runs: 1, map_mean: m, map_std: 0.0, mean_precision_mean: m, mean_precision_std: 0.0 };
        let mut one = BTreeMap::new();
        one.insert(VariantKind::Rgbd, agg(0.5));
        assert!(matches!(comparison_report(&one), Err(EvalError::TooFewVariants)));
        one.insert(VariantKind::DepthOnly, agg(0.0));
        assert!(matches!(comparison_report(&one), Err(EvalError::DivisionByZero(_))));
        one.insert(VariantKind::DepthOnly, agg(0.5));
        let r = comparison_report(&one).unwrap();
        assert_eq!(r.deltas[0].map_percent, 0.0);
        assert!(r.to_markdown().contains("| RGB-D vs Depth-only | +0.0% | +0.0% |"));
    }

    #[test]
    fn coco_result_round_trip() {
        let d = Detection { bbox: BBox::new(1.5, 2.0, 11.5, 7.0), class_id: 4, score: 0.75 };
        let r = CocoResult::from_detection(3, &d);
        assert_eq!(r.bbox, [1.5, 2.0, 10.0, 5.0]);
        assert_eq!(r.category_id, 5);
        assert_eq!(r.to_detection(), d);
    }
}
