mod common;

use common::oracles::{assign_oracle, int_box, nms_oracle, pixel_iou, random_instance};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rgbd_fusion::detect::{
    assign_targets, build_model, decode_box, encode_box, generate_anchors, iou, loss_and_grad, nms_indices, roi_pool,
    ArchConfig, BBox, DetectorModel, Targets,
};
use rgbd_fusion::fusion::VariantKind;
use rgbd_fusion::tensor::Tensor;

#[test]
fn iou_matches_pixel_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..2000 {
        let (a, b) = (int_box(&mut rng, 40), int_box(&mut rng, 40));
        assert!((iou(&a, &b) - pixel_iou(&a, &b, 40)).abs() < 1e-9, "{a:?} {b:?}");
    }
}

#[test]
fn anchors_match_nested_loop() {
    let scales = [16.0, 32.0, 64.0];
    let ratios = [0.5, 1.0, 2.0];
    let anchors = generate_anchors(4, 4, 16.0, &scales, &ratios);
    assert_eq!(anchors.len(), 144);
    let mut i = 0;
    for y in 0..4 {
        for x in 0..4 {
            for s in scales {
                for r in ratios {
                    let a = &anchors[i];
                    let (cx, cy) = a.center();
                    assert!((cx - (x as f64 * 16.0 + 8.0)).abs() < 1e-12 && (cy - (y as f64 * 16.0 + 8.0)).abs() < 1e-12);
                    assert!((a.area() - s * s).abs() < 1e-9);
                    assert!((a.height() / a.width() - r).abs() < 1e-12);
                    i += 1;
                }
            }
        }
    }
}

#[test]
fn nms_matches_quadratic_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let (boxes, scores, classes) = random_instance(&mut rng);
        let thr = rng.random_range(0.2..0.8);
        assert_eq!(nms_indices(&boxes, &scores, &classes, thr), nms_oracle(&boxes, &scores, &classes, thr));
    }
}

#[test]
fn nms_output_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let (boxes, scores, classes) = random_instance(&mut rng);
        let kept = nms_indices(&boxes, &scores, &classes, 0.5);
        for (a, &i) in kept.iter().enumerate() {
            for &j in &kept[a + 1..] {
                assert!(scores[i] >= scores[j]);
                assert!(classes[i] != classes[j] || iou(&boxes[i], &boxes[j]) <= 0.5);
            }
        }
        // every dropped box is explained by a kept box of the same class scoring at least as high
        for d in (0..boxes.len()).filter(|d| !kept.contains(d)) {
            assert!(kept.iter().any(|&k| classes[k] == classes[d] && scores[k] >= scores[d] && iou(&boxes[k], &boxes[d]) > 0.5));
        }
        assert_eq!(nms_indices(&boxes, &scores, &classes, 1.0).len(), boxes.len());
    }
}

#[test]
fn nms_keep_count_is_not_monotone_in_threshold() {
    // Keep sets can shrink when the threshold rises: a box that survives earlier
    // can suppress boxes that a stricter threshold would have kept.
    let boxes = [
        BBox::new(0.0, 0.0, 10.0, 10.0),
        BBox::new(2.5, 0.0, 12.5, 10.0),
        BBox::new(4.5, 0.0, 14.5, 10.0),
        BBox::new(2.5, 1.8, 12.5, 11.8),
    ];
    let scores = [0.9, 0.8, 0.7, 0.6];
    let classes = [0; 4];
    assert_eq!(nms_indices(&boxes, &scores, &classes, 0.5), vec![0, 2, 3]);
    assert_eq!(nms_indices(&boxes, &scores, &classes, 0.65), vec![0, 1]);
}

#[test]
fn assign_targets_matches_exhaustive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let fw = rng.random_range(1..6);
        let fh = rng.random_range(1..6);
        let anchors = generate_anchors(fw, fh, 16.0, &[12.0, 24.0, 40.0], &[0.5, 1.0, 2.0]);
        let n = rng.random_range(0..5);
        let gts: Vec<BBox> = (0..n).map(|_| int_box(&mut rng, 16 * fw.max(fh) as i32 + 2)).collect();
        let classes: Vec<usize> = (0..n).map(|_| rng.random_range(0..9)).collect();
        assert_eq!(assign_targets(&anchors, &gts, &classes, 0.7, 0.3), assign_oracle(&anchors, &gts, &classes, 0.7, 0.3));
    }
}

#[test]
fn roi_pool_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let (c, h, w) = (rng.random_range(1..4), rng.random_range(2..12), rng.random_range(2..12));
        let feat = Tensor::from_vec(&[c, h, w], (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect());
        let x0: f64 = rng.random_range(-0.4..w as f64 - 0.5);
        let y0: f64 = rng.random_range(-0.4..h as f64 - 0.5);
        let region = BBox::new(x0, y0, x0 + rng.random_range(0.5..8.0), y0 + rng.random_range(0.5..8.0));
        let k = rng.random_range(1..4);
        let out = roi_pool(&feat, &region, k).unwrap();
        let r = region.clip(w as f64, h as f64);
        for ch in 0..c {
            for by in 0..k {
                for bx in 0..k {
                    let lo_x = ((r.x_min + bx as f64 * r.width() / k as f64).floor() as usize).min(w - 1);
                    let hi_x = ((r.x_min + (bx + 1) as f64 * r.width() / k as f64).ceil() as usize).clamp(lo_x + 1, w);
                    let lo_y = ((r.y_min + by as f64 * r.height() / k as f64).floor() as usize).min(h - 1);
                    let hi_y = ((r.y_min + (by + 1) as f64 * r.height() / k as f64).ceil() as usize).clamp(lo_y + 1, h);
                    let mut best = f64::NEG_INFINITY;
                    for y in lo_y..hi_y {
                        for x in lo_x..hi_x {
                            best = best.max(feat.data()[(ch * h + y) * w + x]);
                        }
                    }
                    let o = (ch * k + by) * k + bx;
                    assert_eq!(out.pooled.data()[o], best);
                    assert_eq!(feat.data()[out.argmax[o]], best);
                }
            }
        }
    }
}

#[test]
fn variant_parity_default_architecture() {
    let arch = ArchConfig::default();
    let rgb = build_model(VariantKind::RgbOnly, &arch, 0).unwrap();
    let rgbd = build_model(VariantKind::Rgbd, &arch, 0).unwrap();
    let depth = build_model(VariantKind::DepthOnly, &arch, 0).unwrap();
    assert_eq!(rgbd.parameter_count() - rgb.parameter_count(), 3 * 3 * 16);
    assert_eq!(rgb.parameter_count() - depth.parameter_count(), 2 * 3 * 3 * 16);
    let (a, b) = (rgb.architecture(), rgbd.architecture());
    assert_eq!(a.len(), b.len());
    for (i, ((na, sa), (nb, sb))) in a.iter().zip(&b).enumerate() {
        assert_eq!(na, nb);
        if i == 0 {
            assert_eq!((sa[1], sb[1]), (3, 4));
            assert_eq!((&sa[..1], &sa[2..]), (&sb[..1], &sb[2..]));
        } else {
            assert_eq!(sa, sb);
        }
    }
}

fn tiny_model() -> DetectorModel {
    let arch = ArchConfig {
        backbone_widths: vec![8, 16],
        rpn_channels: 16,
        anchor_scales: vec![8.0, 14.0],
        anchor_ratios: vec![1.0],
        head_hidden: 16,
        num_classes: 2,
        ..ArchConfig::default()
    };
    build_model(VariantKind::Rgbd, &arch, 3).unwrap()
}

#[test]
fn loss_is_non_negative_and_drops_under_descent() {
    let mut model = tiny_model();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let input = Tensor::from_vec(&[4, 24, 24], (0..4 * 24 * 24).map(|_| rng.random_range(-1.0..1.0)).collect());
    let targets = Targets { boxes: vec![BBox::new(3.0, 4.0, 13.0, 15.0), BBox::new(12.0, 10.0, 22.0, 21.0)], classes: vec![0, 1] };
    let (first, _) = loss_and_grad(&model, &input, &targets).unwrap();
    let mut last = first;
    for _ in 0..50 {
        let (l, g) = loss_and_grad(&model, &input, &targets).unwrap();
        assert!(l.rpn_cls >= 0.0 && l.rpn_reg >= 0.0 && l.det_cls >= 0.0 && l.det_reg >= 0.0);
        for (p, gt) in model.params_mut().iter_mut().zip(&g.tensors) {
            for (w, d) in p.tensor.data_mut().iter_mut().zip(gt.data()) {
                *w -= 0.02 * d;
            }
        }
        last = l;
    }
    assert!(last.total() < first.total(), "{} -> {}", first.total(), last.total());
}

proptest! {
    #[test]
    fn encode_decode_round_trip(
        x in -100.0..500.0f64, y in -100.0..500.0f64, w in 1.0..300.0f64, h in 1.0..300.0f64,
        ax in 0.0..400.0f64, ay in 0.0..400.0f64, aw in 4.0..200.0f64, ah in 4.0..200.0f64,
    ) {
        let gt = BBox::new(x, y, x + w, y + h);
        let anchor = BBox::new(ax, ay, ax + aw, ay + ah);
        let back = decode_box(&encode_box(&gt, &anchor).unwrap(), &anchor).unwrap();
        for (a, b) in [(back.x_min, gt.x_min), (back.y_min, gt.y_min), (back.x_max, gt.x_max), (back.y_max, gt.y_max)] {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in (0.0..50.0f64, 0.0..50.0f64, 0.1..50.0f64, 0.1..50.0f64), b in (0.0..50.0f64, 0.0..50.0f64, 0.1..50.0f64, 0.1..50.0f64)) {
        let ba = BBox::new(a.0, a.1, a.0 + a.2, a.1 + a.3);
        let bb = BBox::new(b.0, b.1, b.0 + b.2, b.1 + b.3);
        let v = iou(&ba, &bb);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, iou(&bb, &ba));
        prop_assert!((iou(&ba, &ba) - 1.0).abs() < 1e-12);
    }
}
