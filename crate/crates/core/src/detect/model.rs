//! The reduced two-stage detector.
//!
//! Backbone: a stack of `k x k` stride-2 convolutions (optionally followed by
//! stride-1 convolutions per block), each with ReLU. RPN: a 3x3 convolution
//! with ReLU, then 1x1 objectness logits (one per anchor, sigmoid) and 1x1
//! box deltas. Head: RoI max pooling, one hidden dense layer with ReLU, then
//! softmax class logits (background at index 0) and per-class box deltas.
//!
//! Only the first convolution depends on the variant: its input-channel count is
//! the variant's channel count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::geometry::{
    assign_targets, decode_clamped, encode_box, generate_anchors, iou, nms_indices, AnchorLabel, BBox, BoxDelta,
    Detection,
};
use super::layers::{
    conv2d_backward, conv2d_forward, linear_backward, linear_forward, relu_backward_in_place, relu_in_place,
};
use super::roi::{roi_pool, roi_pool_backward};
use super::DetectError;
use crate::fusion::VariantKind;
use crate::tensor::Tensor;

/// Detector architecture and its fixed training/inference hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    /// Output width of each downsampling block; total stride is `2^len`.
    pub backbone_widths: Vec<usize>,
    /// Extra stride-1 convolutions after each downsampling convolution.
    pub extra_convs_per_block: usize,
    pub kernel_size: usize,
    pub rpn_channels: usize,
    pub anchor_scales: Vec<f64>,
    /// Height / width.
    pub anchor_ratios: Vec<f64>,
    pub roi_size: usize,
    pub head_hidden: usize,
    /// Foreground classes; the head adds one background class.
    pub num_classes: usize,
    pub rpn_pos_iou: f64,
    pub rpn_neg_iou: f64,
    pub rpn_batch: usize,
    pub rpn_pos_fraction: f64,
    pub head_pos_iou: f64,
    pub head_neg_iou: f64,
    pub head_batch: usize,
    pub head_pos_fraction: f64,
    pub proposal_nms: f64,
    pub pre_nms_top_n: usize,
    pub proposals_train: usize,
    pub proposals_test: usize,
    pub min_proposal_size: f64,
    pub smooth_l1_beta: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            backbone_widths: vec![16, 32, 64, 64],
            extra_convs_per_block: 0,
            kernel_size: 3,
            rpn_channels: 64,
            anchor_scales: vec![16.0, 32.0, 64.0],
            anchor_ratios: vec![0.5, 1.0, 2.0],
            roi_size: 3,
            head_hidden: 128,
            num_classes: 9,
            rpn_pos_iou: 0.7,
            rpn_neg_iou: 0.3,
            rpn_batch: 256,
            rpn_pos_fraction: 0.5,
            head_pos_iou: 0.5,
            head_neg_iou: 0.5,
            head_batch: 64,
            head_pos_fraction: 0.25,
            proposal_nms: 0.7,
            pre_nms_top_n: 1000,
            proposals_train: 300,
            proposals_test: 100,
            min_proposal_size: 1.0,
            smooth_l1_beta: 1.0,
        }
    }
}

impl ArchConfig {
    pub fn stride(&self) -> usize {
        1 << self.backbone_widths.len()
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_scales.len() * self.anchor_ratios.len()
    }

    pub fn feature_channels(&self) -> usize {
        *self.backbone_widths.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<(), DetectError> {
        let bad = |m: &str| Err(DetectError::ConfigInvalid(m.to_string()));
        if self.backbone_widths.is_empty() || self.backbone_widths.contains(&0) {
            return bad("backbone needs at least one block of positive width");
        }
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return bad("kernel size must be odd");
        }
        if self.anchor_scales.is_empty() || self.anchor_ratios.is_empty() {
            return bad("anchor scales and ratios must be non-empty");
        }
        if self.anchor_scales.iter().chain(&self.anchor_ratios).any(|v| !(*v > 0.0 && v.is_finite())) {
            return bad("anchor scales and ratios must be positive");
        }
        if self.rpn_channels == 0 || self.head_hidden == 0 || self.roi_size == 0 || self.num_classes == 0 {
            return bad("layer sizes and class count must be positive");
        }
        for (lo, hi) in [(self.rpn_neg_iou, self.rpn_pos_iou), (self.head_neg_iou, self.head_pos_iou)] {
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return bad("IoU thresholds must satisfy 0 <= neg <= pos <= 1");
            }
        }
        if self.rpn_batch == 0 || self.head_batch == 0 || self.proposals_train == 0 || self.proposals_test == 0 {
            return bad("sampling sizes must be positive");
        }
        if !(self.smooth_l1_beta > 0.0) {
            return bad("smooth-L1 beta must be positive");
        }
        Ok(())
    }
}

/// A parameter tensor with a stable name.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// Indices into the parameter list.
#[derive(Debug, Clone)]
struct Layout {
    /// (weight index, stride) per backbone convolution; bias is `weight + 1`.
    backbone: Vec<(usize, usize)>,
    rpn_conv: usize,
    rpn_cls: usize,
    rpn_reg: usize,
    head_fc: usize,
    head_cls: usize,
    head_reg: usize,
}

/// Detector weights plus the configuration that produced them.
#[derive(Debug, Clone)]
pub struct DetectorModel {
    pub variant: VariantKind,
    pub arch: ArchConfig,
    pub seed: u64,
    params: Vec<NamedTensor>,
    layout: Layout,
}

/// Per-image or batch-mean training losses.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub det_cls: f64,
    pub det_reg: f64,
}

impl Losses {
    pub fn total(&self) -> f64 {
        self.rpn_cls + self.rpn_reg + self.det_cls + self.det_reg
    }

    pub fn is_finite(&self) -> bool {
        [self.rpn_cls, self.rpn_reg, self.det_cls, self.det_reg].iter().all(|v| v.is_finite())
    }

    fn add_scaled(&mut self, other: &Losses, s: f64) {
        self.rpn_cls += s * other.rpn_cls;
        self.rpn_reg += s * other.rpn_reg;
        self.det_cls += s * other.det_cls;
        self.det_reg += s * other.det_reg;
    }
}

/// Ground truth for one image, in input pixels. Class ids are 0-based foreground ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Targets {
    pub boxes: Vec<BBox>,
    pub classes: Vec<usize>,
}

/// A normalized `[C, H, W]` input with its targets.
#[derive(Debug, Clone)]
pub struct Sample {
    pub input: Tensor,
    pub targets: Targets,
}

fn layer_shapes(variant: VariantKind, arch: &ArchConfig) -> (Vec<(String, Vec<usize>)>, Layout) {
    let k = arch.kernel_size;
    let mut shapes = Vec::new();
    let mut backbone = Vec::new();
    let mut in_ch = variant.channel_count();
    for (b, &width) in arch.backbone_widths.iter().enumerate() {
        for j in 0..=arch.extra_convs_per_block {
            let stride = if j == 0 { 2 } else { 1 };
            backbone.push((shapes.len(), stride));
            shapes.push((format!("backbone.{b}.{j}.weight"), vec![width, in_ch, k, k]));
            shapes.push((format!("backbone.{b}.{j}.bias"), vec![width]));
            in_ch = width;
        }
    }
    let a = arch.anchors_per_cell();
    let c = arch.feature_channels();
    let r = arch.rpn_channels;
    let rpn_conv = shapes.len();
    shapes.push(("rpn.conv.weight".into(), vec![r, c, 3, 3]));
    shapes.push(("rpn.conv.bias".into(), vec![r]));
    let rpn_cls = shapes.len();
    shapes.push(("rpn.cls.weight".into(), vec![a, r, 1, 1]));
    shapes.push(("rpn.cls.bias".into(), vec![a]));
    let rpn_reg = shapes.len();
    shapes.push(("rpn.reg.weight".into(), vec![4 * a, r, 1, 1]));
    shapes.push(("rpn.reg.bias".into(), vec![4 * a]));
    let pooled = c * arch.roi_size * arch.roi_size;
    let head_fc = shapes.len();
    shapes.push(("head.fc.weight".into(), vec![arch.head_hidden, pooled]));
    shapes.push(("head.fc.bias".into(), vec![arch.head_hidden]));
    let head_cls = shapes.len();
    shapes.push(("head.cls.weight".into(), vec![arch.num_classes + 1, arch.head_hidden]));
    shapes.push(("head.cls.bias".into(), vec![arch.num_classes + 1]));
    let head_reg = shapes.len();
    shapes.push(("head.reg.weight".into(), vec![4 * arch.num_classes, arch.head_hidden]));
    shapes.push(("head.reg.bias".into(), vec![4 * arch.num_classes]));
    (shapes, Layout { backbone, rpn_conv, rpn_cls, rpn_reg, head_fc, head_cls, head_reg })
}

/// Builds a freshly initialized detector. Hidden layers use He-normal weights,
/// output layers N(0, 0.01) (box regression N(0, 0.001)), all biases zero.
pub fn build_model(variant: VariantKind, arch: &ArchConfig, seed: u64) -> Result<DetectorModel, DetectError> {
    arch.validate()?;
    let (shapes, layout) = layer_shapes(variant, arch);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let output_std = |name: &str| match name {
        "rpn.cls.weight" | "rpn.reg.weight" | "head.cls.weight" => Some(0.01),
        "head.reg.weight" => Some(0.001),
        _ => None,
    };
    let params = shapes
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".bias") {
                vec![0.0; n]
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let std = output_std(&name).unwrap_or_else(|| (2.0 / fan_in as f64).sqrt());
                let normal = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            };
            NamedTensor { name, tensor: Tensor::from_vec(&shape, data) }
        })
        .collect();
    Ok(DetectorModel { variant, arch: arch.clone(), seed, params, layout })
}

/// Parameter gradients, parallel to [`DetectorModel::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(model: &DetectorModel) -> Self {
        Self { tensors: model.params.iter().map(|p| Tensor::zeros(p.tensor.shape())).collect() }
    }

    fn add_scaled(&mut self, other: &Gradients, s: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += s * y;
            }
        }
    }
}

struct Activations {
    /// Input of each backbone convolution followed by the final feature map.
    backbone: Vec<Tensor>,
    rpn_hidden: Tensor,
    rpn_cls: Tensor,
    rpn_reg: Tensor,
    anchors: Vec<BBox>,
}

impl DetectorModel {
    pub fn params(&self) -> &[NamedTensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Parameter names and shapes in order.
    pub fn architecture(&self) -> Vec<(String, Vec<usize>)> {
        self.params.iter().map(|p| (p.name.clone(), p.tensor.shape().to_vec())).collect()
    }

    pub fn first_layer_input_channels(&self) -> usize {
        self.params[0].tensor.shape()[1]
    }

    /// Replaces the weights; names and shapes must match this architecture.
    pub fn load_params(&mut self, tensors: Vec<NamedTensor>) -> Result<(), DetectError> {
        if tensors.len() != self.params.len() {
            return Err(DetectError::ShapeMismatch(format!(
                "expected {} tensors, got {}",
                self.params.len(),
                tensors.len()
            )));
        }
        for (mine, theirs) in self.params.iter().zip(&tensors) {
            if mine.name != theirs.name || mine.tensor.shape() != theirs.tensor.shape() {
                return Err(DetectError::ShapeMismatch(format!(
                    "tensor {} {:?} does not match {} {:?}",
                    theirs.name,
                    theirs.tensor.shape(),
                    mine.name,
                    mine.tensor.shape()
                )));
            }
        }
        self.params = tensors;
        Ok(())
    }

    fn p(&self, i: usize) -> &Tensor {
        &self.params[i].tensor
    }

    fn check_input(&self, input: &Tensor) -> Result<(), DetectError> {
        let s = input.shape();
        if s.len() != 3 || s[0] != self.variant.channel_count() {
            return Err(DetectError::ShapeMismatch(format!(
                "{} variant expects [{}, H, W] input, got {:?}",
                self.variant,
                self.variant.channel_count(),
                s
            )));
        }
        let stride = self.arch.stride();
        if s[1] < stride || s[2] < stride {
            return Err(DetectError::ShapeMismatch(format!("input {}x{} smaller than stride {stride}", s[2], s[1])));
        }
        Ok(())
    }

    fn forward_shared(&self, input: &Tensor) -> Activations {
        let pad = self.arch.kernel_size / 2;
        let mut backbone = vec![input.clone()];
        for &(wi, stride) in &self.layout.backbone {
            let mut z = conv2d_forward(backbone.last().unwrap(), self.p(wi), self.p(wi + 1), stride, pad);
            relu_in_place(&mut z);
            backbone.push(z);
        }
        let feat = backbone.last().unwrap();
        let mut rpn_hidden = conv2d_forward(feat, self.p(self.layout.rpn_conv), self.p(self.layout.rpn_conv + 1), 1, 1);
        relu_in_place(&mut rpn_hidden);
        let rpn_cls = conv2d_forward(&rpn_hidden, self.p(self.layout.rpn_cls), self.p(self.layout.rpn_cls + 1), 1, 0);
        let rpn_reg = conv2d_forward(&rpn_hidden, self.p(self.layout.rpn_reg), self.p(self.layout.rpn_reg + 1), 1, 0);
        let (fh, fw) = (feat.shape()[1], feat.shape()[2]);
        let anchors = generate_anchors(fw, fh, self.arch.stride() as f64, &self.arch.anchor_scales, &self.arch.anchor_ratios);
        Activations { backbone, rpn_hidden, rpn_cls, rpn_reg, anchors }
    }

    /// Objectness logit and delta of anchor `idx`.
    fn anchor_outputs(&self, act: &Activations, idx: usize) -> (f64, BoxDelta) {
        let a = self.arch.anchors_per_cell();
        let plane = act.rpn_cls.shape()[1] * act.rpn_cls.shape()[2];
        let (cell, slot) = (idx / a, idx % a);
        let logit = act.rpn_cls.data()[slot * plane + cell];
        let r = act.rpn_reg.data();
        let d = [0, 1, 2, 3].map(|j| r[(4 * slot + j) * plane + cell]);
        (logit, BoxDelta::from_array(d))
    }

    fn proposals_from(&self, act: &Activations, img_w: f64, img_h: f64, keep: usize) -> Vec<BBox> {
        let mut cands: Vec<(f64, BBox)> = (0..act.anchors.len())
            .filter_map(|i| {
                let (logit, delta) = self.anchor_outputs(act, i);
                let b = decode_clamped(&delta, &act.anchors[i]).clip(img_w, img_h);
                let ok = b.width() >= self.arch.min_proposal_size && b.height() >= self.arch.min_proposal_size;
                (ok && logit.is_finite()).then_some((logit, b))
            })
            .collect();
        cands.sort_by(|a, b| b.0.total_cmp(&a.0));
        cands.truncate(self.arch.pre_nms_top_n);
        let boxes: Vec<BBox> = cands.iter().map(|c| c.1).collect();
        let scores: Vec<f64> = cands.iter().map(|c| c.0).collect();
        let kept = nms_indices(&boxes, &scores, &vec![0; boxes.len()], self.arch.proposal_nms);
        kept.into_iter().take(keep).map(|i| boxes[i]).collect()
    }

    /// Region proposals for an input, highest objectness first.
    pub fn proposals(&self, input: &Tensor, training: bool) -> Result<Vec<BBox>, DetectError> {
        self.check_input(input)?;
        let act = self.forward_shared(input);
        let keep = if training { self.arch.proposals_train } else { self.arch.proposals_test };
        Ok(self.proposals_from(&act, input.shape()[2] as f64, input.shape()[1] as f64, keep))
    }

    fn head_forward(&self, feat: &Tensor, roi: &BBox) -> Result<HeadPass, DetectError> {
        let stride = self.arch.stride() as f64;
        let pooled = roi_pool(feat, &roi.scale(1.0 / stride), self.arch.roi_size)?;
        let mut hidden = linear_forward(pooled.pooled.data(), self.p(self.layout.head_fc), self.p(self.layout.head_fc + 1));
        for v in hidden.iter_mut() {
            *v = v.max(0.0);
        }
        let logits = linear_forward(&hidden, self.p(self.layout.head_cls), self.p(self.layout.head_cls + 1));
        let deltas = linear_forward(&hidden, self.p(self.layout.head_reg), self.p(self.layout.head_reg + 1));
        Ok(HeadPass { pooled: pooled.pooled.into_data(), argmax: pooled.argmax, hidden, logits, deltas })
    }

    /// Detections for one normalized input: proposals, RoI head, per-class
    /// decoding, score filtering, class-wise NMS and the top `max_detections`.
    pub fn predict(
        &self,
        input: &Tensor,
        score_threshold: f64,
        nms_threshold: f64,
        max_detections: usize,
    ) -> Result<Vec<Detection>, DetectError> {
        self.check_input(input)?;
        let (img_h, img_w) = (input.shape()[1] as f64, input.shape()[2] as f64);
        let act = self.forward_shared(input);
        let proposals = self.proposals_from(&act, img_w, img_h, self.arch.proposals_test);
        let feat = act.backbone.last().unwrap();
        let mut dets = Vec::new();
        for roi in &proposals {
            let pass = match self.head_forward(feat, roi) {
                Ok(p) => p,
                Err(DetectError::EmptyBox) => continue,
                Err(e) => return Err(e),
            };
            let probs = softmax(&pass.logits);
            for cls in 0..self.arch.num_classes {
                let score = probs[cls + 1];
                if score < score_threshold {
                    continue;
                }
                let d = BoxDelta::from_array([0, 1, 2, 3].map(|j| pass.deltas[4 * cls + j]));
                let bbox = decode_clamped(&d, roi).clip(img_w, img_h);
                if bbox.is_valid() {
                    dets.push(Detection { bbox, class_id: cls, score });
                }
            }
        }
        let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
        let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
        let classes: Vec<usize> = dets.iter().map(|d| d.class_id).collect();
        let kept = nms_indices(&boxes, &scores, &classes, nms_threshold);
        Ok(kept.into_iter().take(max_detections).map(|i| dets[i]).collect())
    }
}

struct HeadPass {
    pooled: Vec<f64>,
    argmax: Vec<usize>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
    deltas: Vec<f64>,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Smooth-L1 value and derivative.
fn smooth_l1(x: f64, beta: f64) -> (f64, f64) {
    if x.abs() < beta {
        (0.5 * x * x / beta, x / beta)
    } else {
        (x.abs() - 0.5 * beta, x.signum())
    }
}

/// Numerically stable `-ln(sigmoid(z))` for target 1 (or `-ln(1 - sigmoid(z))` for 0) and its derivative.
fn bce_with_logit(z: f64, positive: bool) -> (f64, f64) {
    let sig = 1.0 / (1.0 + (-z).exp());
    let softplus = |v: f64| if v > 0.0 { v + (-v).exp().ln_1p() } else { v.exp().ln_1p() };
    if positive {
        (softplus(-z), sig - 1.0)
    } else {
        (softplus(z), sig)
    }
}

/// Picks up to `quota` items spread evenly over `items`.
fn spread_take(items: &[usize], quota: usize) -> Vec<usize> {
    if items.len() <= quota {
        return items.to_vec();
    }
    (0..quota).map(|i| items[i * items.len() / quota]).collect()
}

/// Deterministic balanced sample: positives first, then negatives fill the batch.
fn sample_labels(positives: &[usize], negatives: &[usize], batch: usize, pos_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let pos_quota = ((batch as f64 * pos_fraction).floor() as usize).max(1);
    let pos = spread_take(positives, pos_quota);
    let neg = spread_take(negatives, batch.saturating_sub(pos.len()));
    (pos, neg)
}

/// Training losses and gradients for one image.
///
/// Objectness is binary cross-entropy averaged over the sampled anchors; head
/// classification is softmax cross-entropy averaged over the sampled RoIs.
/// Both box regressions are smooth-L1 summed over the four deltas of each
/// positive and divided by the number of positives. RoIs are the current
/// proposals plus the ground-truth boxes.
pub fn loss_and_grad(model: &DetectorModel, input: &Tensor, targets: &Targets) -> Result<(Losses, Gradients), DetectError> {
    model.check_input(input)?;
    let act = model.forward_shared(input);
    let (img_h, img_w) = (input.shape()[1] as f64, input.shape()[2] as f64);
    let proposals = model.proposals_from(&act, img_w, img_h, model.arch.proposals_train);
    backward_pass(model, act, &proposals, targets)
}

/// Like [`loss_and_grad`] but with the RPN proposals supplied by the caller,
/// which makes the loss a smooth function of the weights for gradient checks.
pub fn loss_and_grad_with_proposals(
    model: &DetectorModel,
    input: &Tensor,
    targets: &Targets,
    proposals: &[BBox],
) -> Result<(Losses, Gradients), DetectError> {
    model.check_input(input)?;
    let act = model.forward_shared(input);
    backward_pass(model, act, proposals, targets)
}

/// Losses only.
pub fn forward_train(model: &DetectorModel, input: &Tensor, targets: &Targets) -> Result<Losses, DetectError> {
    loss_and_grad(model, input, targets).map(|(l, _)| l)
}

/// Mean losses and gradients over a batch. Samples run in parallel and are
/// summed in batch order, so the result does not depend on scheduling.
pub fn batch_loss_and_grad(model: &DetectorModel, batch: &[&Sample]) -> Result<(Losses, Gradients), DetectError> {
    use rayon::prelude::*;
    let per_sample: Vec<(Losses, Gradients)> =
        batch.par_iter().map(|sample| loss_and_grad(model, &sample.input, &sample.targets)).collect::<Result<_, _>>()?;
    let mut losses = Losses::default();
    let mut grads = Gradients::zeros_like(model);
    let s = 1.0 / batch.len().max(1) as f64;
    for (l, g) in &per_sample {
        losses.add_scaled(l, s);
        grads.add_scaled(g, s);
    }
    Ok((losses, grads))
}

fn backward_pass(
    model: &DetectorModel,
    act: Activations,
    proposals: &[BBox],
    targets: &Targets,
) -> Result<(Losses, Gradients), DetectError> {
    if targets.boxes.len() != targets.classes.len() {
        return Err(DetectError::ShapeMismatch("one class per target box".into()));
    }
    if let Some(&c) = targets.classes.iter().find(|&&c| c >= model.arch.num_classes) {
        return Err(DetectError::ShapeMismatch(format!("class id {c} >= {}", model.arch.num_classes)));
    }
    if targets.boxes.iter().any(|b| !b.is_valid()) {
        return Err(DetectError::NonPositiveSize);
    }
    let arch = &model.arch;
    let lay = &model.layout;
    let beta = arch.smooth_l1_beta;
    let mut grads = Gradients::zeros_like(model);
    let mut losses = Losses::default();

    // RPN objectness and regression.
    let labels = assign_targets(&act.anchors, &targets.boxes, &targets.classes, arch.rpn_pos_iou, arch.rpn_neg_iou);
    let positives: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_positive()).collect();
    let negatives: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == AnchorLabel::Negative).collect();
    let (pos, neg) = sample_labels(&positives, &negatives, arch.rpn_batch, arch.rpn_pos_fraction);
    let a = arch.anchors_per_cell();
    let plane = act.rpn_cls.shape()[1] * act.rpn_cls.shape()[2];
    let mut g_cls = Tensor::zeros(act.rpn_cls.shape());
    let mut g_reg = Tensor::zeros(act.rpn_reg.shape());
    let n_sampled = (pos.len() + neg.len()).max(1) as f64;
    for (&i, positive) in pos.iter().map(|i| (i, true)).chain(neg.iter().map(|i| (i, false))) {
        let (logit, _) = model.anchor_outputs(&act, i);
        let (l, d) = bce_with_logit(logit, positive);
        losses.rpn_cls += l / n_sampled;
        g_cls.data_mut()[(i % a) * plane + i / a] += d / n_sampled;
    }
    let n_pos = pos.len().max(1) as f64;
    for &i in &pos {
        let AnchorLabel::Positive { delta: target, .. } = labels[i] else { unreachable!() };
        let (_, pred) = model.anchor_outputs(&act, i);
        for (j, (p, t)) in pred.to_array().iter().zip(target.to_array()).enumerate() {
            let (l, d) = smooth_l1(p - t, beta);
            losses.rpn_reg += l / n_pos;
            g_reg.data_mut()[(4 * (i % a) + j) * plane + i / a] += d / n_pos;
        }
    }

    // Detection head.
    let feat = act.backbone.last().unwrap();
    let mut g_feat = Tensor::zeros(feat.shape());
    let rois: Vec<BBox> = proposals.iter().chain(&targets.boxes).copied().collect();
    let mut roi_pos = Vec::new();
    let mut roi_neg = Vec::new();
    let mut roi_gt = vec![None; rois.len()];
    for (r, roi) in rois.iter().enumerate() {
        let best = targets
            .boxes
            .iter()
            .enumerate()
            .map(|(g, b)| (g, iou(roi, b)))
            .fold(None, |acc: Option<(usize, f64)>, (g, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((g, v)),
            });
        match best {
            Some((g, v)) if v >= arch.head_pos_iou => {
                roi_gt[r] = Some(g);
                roi_pos.push(r);
            }
            Some((_, v)) if v >= arch.head_neg_iou => {}
            _ => roi_neg.push(r),
        }
    }
    let (hpos, hneg) = sample_labels(&roi_pos, &roi_neg, arch.head_batch, arch.head_pos_fraction);
    let n_rois = (hpos.len() + hneg.len()).max(1) as f64;
    let n_hpos = hpos.len().max(1) as f64;
    let nc = arch.num_classes;
    for &r in hpos.iter().chain(&hneg) {
        let pass = match model.head_forward(feat, &rois[r]) {
            Ok(p) => p,
            Err(DetectError::EmptyBox) => continue,
            Err(e) => return Err(e),
        };
        let label = roi_gt[r].map_or(0, |g| targets.classes[g] + 1);
        let probs = softmax(&pass.logits);
        losses.det_cls += -probs[label].max(f64::MIN_POSITIVE).ln() / n_rois;
        let mut g_logits: Vec<f64> = probs.iter().map(|p| p / n_rois).collect();
        g_logits[label] -= 1.0 / n_rois;
        let mut g_deltas = vec![0.0; 4 * nc];
        if let Some(g) = roi_gt[r] {
            let cls = targets.classes[g];
            let target = encode_box(&targets.boxes[g], &rois[r])?.to_array();
            for j in 0..4 {
                let (l, d) = smooth_l1(pass.deltas[4 * cls + j] - target[j], beta);
                losses.det_reg += l / n_hpos;
                g_deltas[4 * cls + j] = d / n_hpos;
            }
        }
        let (gw, gb) = split_pair(&mut grads.tensors, lay.head_cls);
        let mut g_hidden = linear_backward(&pass.hidden, model.p(lay.head_cls), &g_logits, gw.data_mut(), gb.data_mut());
        let (gw, gb) = split_pair(&mut grads.tensors, lay.head_reg);
        let g2 = linear_backward(&pass.hidden, model.p(lay.head_reg), &g_deltas, gw.data_mut(), gb.data_mut());
        for (a, b) in g_hidden.iter_mut().zip(&g2) {
            *a += b;
        }
        relu_backward_in_place(&mut g_hidden, &pass.hidden);
        let (gw, gb) = split_pair(&mut grads.tensors, lay.head_fc);
        let g_pooled = linear_backward(&pass.pooled, model.p(lay.head_fc), &g_hidden, gw.data_mut(), gb.data_mut());
        roi_pool_backward(&g_pooled, &pass.argmax, g_feat.data_mut());
    }

    // RPN convolutions back to the feature map.
    let (gx_cls, gw, gb) = conv2d_backward(&act.rpn_hidden, model.p(lay.rpn_cls), &g_cls, 1, 0, true);
    grads.tensors[lay.rpn_cls] = gw;
    grads.tensors[lay.rpn_cls + 1] = gb;
    let (gx_reg, gw, gb) = conv2d_backward(&act.rpn_hidden, model.p(lay.rpn_reg), &g_reg, 1, 0, true);
    grads.tensors[lay.rpn_reg] = gw;
    grads.tensors[lay.rpn_reg + 1] = gb;
    let mut g_hidden = gx_cls.unwrap();
    for (a, b) in g_hidden.data_mut().iter_mut().zip(gx_reg.unwrap().data()) {
        *a += b;
    }
    relu_backward_in_place(g_hidden.data_mut(), act.rpn_hidden.data());
    let (gx, gw, gb) = conv2d_backward(feat, model.p(lay.rpn_conv), &g_hidden, 1, 1, true);
    grads.tensors[lay.rpn_conv] = gw;
    grads.tensors[lay.rpn_conv + 1] = gb;
    for (a, b) in g_feat.data_mut().iter_mut().zip(gx.unwrap().data()) {
        *a += b;
    }

    // Backbone.
    let pad = arch.kernel_size / 2;
    let mut g = g_feat;
    for (l, &(wi, stride)) in lay.backbone.iter().enumerate().rev() {
        relu_backward_in_place(g.data_mut(), act.backbone[l + 1].data());
        let (gx, gw, gb) = conv2d_backward(&act.backbone[l], model.p(wi), &g, stride, pad, l > 0);
        grads.tensors[wi] = gw;
        grads.tensors[wi + 1] = gb;
        if let Some(gx) = gx {
            g = gx;
        }
    }

    if !losses.is_finite() {
        return Err(DetectError::NonFinite);
    }
    Ok((losses, grads))
}

fn split_pair(tensors: &mut [Tensor], weight: usize) -> (&mut Tensor, &mut Tensor) {
    let (a, b) = tensors.split_at_mut(weight + 1);
    (&mut a[weight], &mut b[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch() -> ArchConfig {
        ArchConfig {
            backbone_widths: vec![4, 8],
            rpn_channels: 8,
            anchor_scales: vec![6.0, 10.0],
            anchor_ratios: vec![1.0],
            roi_size: 2,
            head_hidden: 8,
            num_classes: 2,
            ..ArchConfig::default()
        }
    }

    fn input(c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(&[c, h, w], (0..c * h * w).map(|i| ((i as f64) * 0.731).sin()).collect())
    }

    #[test]
    fn same_seed_same_weights() {
        let a = build_model(VariantKind::Rgbd, &ArchConfig::default(), 7).unwrap();
        let b = build_model(VariantKind::Rgbd, &ArchConfig::default(), 7).unwrap();
        assert_eq!(a.params(), b.params());
        let c = build_model(VariantKind::Rgbd, &ArchConfig::default(), 8).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn first_layer_channels_follow_variant() {
        for v in VariantKind::ALL {
            let m = build_model(v, &ArchConfig::default(), 0).unwrap();
            assert_eq!(m.first_layer_input_channels(), v.channel_count());
        }
    }

    #[test]
    fn parameter_delta_rgbd_minus_rgb() {
        let rgbd = build_model(VariantKind::Rgbd, &ArchConfig::default(), 0).unwrap();
        let rgb = build_model(VariantKind::RgbOnly, &ArchConfig::default(), 0).unwrap();
        assert_eq!(rgbd.parameter_count() - rgb.parameter_count(), 144);
    }

    #[test]
    fn invalid_config_rejected() {
        let arch = ArchConfig { kernel_size: 2, ..ArchConfig::default() };
        assert!(matches!(build_model(VariantKind::Rgbd, &arch, 0), Err(DetectError::ConfigInvalid(_))));
        let arch = ArchConfig { rpn_neg_iou: 0.8, ..ArchConfig::default() };
        assert!(matches!(build_model(VariantKind::Rgbd, &arch, 0), Err(DetectError::ConfigInvalid(_))));
    }

    #[test]
    fn wrong_channel_count_is_shape_mismatch() {
        let m = build_model(VariantKind::Rgbd, &small_arch(), 0).unwrap();
        let x = input(3, 16, 16);
        assert!(matches!(m.predict(&x, 0.5, 0.5, 10), Err(DetectError::ShapeMismatch(_))));
        assert!(matches!(forward_train(&m, &x, &Targets::default()), Err(DetectError::ShapeMismatch(_))));
    }

    #[test]
    fn no_targets_means_no_regression_loss() {
        let m = build_model(VariantKind::DepthOnly, &small_arch(), 3).unwrap();
        let l = forward_train(&m, &input(1, 16, 16), &Targets::default()).unwrap();
        assert_eq!((l.rpn_reg, l.det_reg), (0.0, 0.0));
        assert!(l.rpn_cls > 0.0 && l.det_cls > 0.0);
    }

    #[test]
    fn losses_non_negative_with_targets() {
        let m = build_model(VariantKind::RgbOnly, &small_arch(), 3).unwrap();
        let t = Targets { boxes: vec![BBox::new(2.0, 3.0, 11.0, 12.0)], classes: vec![1] };
        let l = forward_train(&m, &input(3, 16, 16), &t).unwrap();
        assert!(l.rpn_cls >= 0.0 && l.rpn_reg >= 0.0 && l.det_cls >= 0.0 && l.det_reg >= 0.0);
        assert!(l.det_reg > 0.0);
    }

    #[test]
    fn zero_logits_predict_nothing() {
        let mut m = build_model(VariantKind::Rgbd, &small_arch(), 1).unwrap();
        let cls = m.layout.head_cls;
        for i in [cls, cls + 1] {
            m.params_mut()[i].tensor.data_mut().fill(0.0);
        }
        assert!(m.predict(&input(4, 16, 16), 0.5, 0.5, 10).unwrap().is_empty());
    }

    #[test]
    fn predict_is_deterministic() {
        let m = build_model(VariantKind::Rgbd, &small_arch(), 11).unwrap();
        let x = input(4, 16, 16);
        let a = m.predict(&x, 0.0, 0.5, 50).unwrap();
        assert_eq!(a, m.predict(&x, 0.0, 0.5, 50).unwrap());
        assert!(a.len() <= 50);
        assert!(a.windows(2).all(|w| w[0].score >= w[1].score));
        for d in &a {
            assert!(d.bbox.x_min >= 0.0 && d.bbox.y_min >= 0.0 && d.bbox.x_max <= 16.0 && d.bbox.y_max <= 16.0);
            assert!((0.0..=1.0).contains(&d.score));
        }
    }

    #[test]
    fn cross_entropy_vanishes_for_confident_logits() {
        let (l, _) = bce_with_logit(40.0, true);
        assert!(l < 1e-15);
        let (l, _) = bce_with_logit(-40.0, false);
        assert!(l < 1e-15);
        let p = softmax(&[50.0, 0.0, 0.0]);
        assert!(-p[0].ln() < 1e-20);
    }

    #[test]
    fn spread_take_is_even() {
        assert_eq!(spread_take(&[0, 1, 2, 3, 4, 5], 3), vec![0, 2, 4]);
        assert_eq!(spread_take(&[7, 8], 5), vec![7, 8]);
    }
}
