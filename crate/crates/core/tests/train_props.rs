mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rgbd_fusion::detect::{build_model, ArchConfig, BBox, DetectorModel, Sample, Targets};
use rgbd_fusion::dataset::{load_coco, DatasetSplit};
use rgbd_fusion::evaluate::{match_detections, EvalOptions, RunMetrics};
use rgbd_fusion::fusion::VariantKind;
use rgbd_fusion::tensor::Tensor;
use rgbd_fusion::pipeline;
use rgbd_fusion::train::{predict_all, run_repeated, run_single, train, Evaluator, PredictOptions, PreparedSplits, TrainConfig, TrainError};

fn arch() -> ArchConfig {
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

fn samples(seed: u64, n: usize) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let input = Tensor::from_vec(&[4, 16, 16], (0..4 * 256).map(|_| rng.random_range(-1.0..1.0)).collect());
            let x: f64 = rng.random_range(0.0..8.0);
            let y: f64 = rng.random_range(0.0..8.0);
            Sample { input, targets: Targets { boxes: vec![BBox::new(x, y, x + 7.0, y + 7.0)], classes: vec![rng.random_range(0..2)] } }
        })
        .collect()
}

/// Returns a scripted mAP per epoch and counts calls.
struct Scripted {
    values: Vec<f64>,
    calls: usize,
}

impl Evaluator for Scripted {
    fn evaluate(&mut self, _model: &DetectorModel, epoch: usize) -> Result<RunMetrics, TrainError> {
        self.calls += 1;
        let v = self.values.get(epoch - 1).copied().unwrap_or(0.0);
        Ok(RunMetrics { map_50: v, mean_precision: v })
    }
}

fn cfg(patience: usize, max_epochs: usize) -> TrainConfig {
    TrainConfig { patience_epochs: patience, max_epochs, batch_size: 2, learning_rate: 0.01, ..TrainConfig::default() }
}

#[test]
fn constant_metric_stops_after_one_plus_patience() {
    let data = samples(1, 2);
    for patience in [1, 3, 10] {
        let mut ev = Scripted { values: vec![0.5; 100], calls: 0 };
        let model = build_model(VariantKind::Rgbd, &arch(), 0).unwrap();
        let (_, history) = train(model, &data, &mut ev, &cfg(patience, 100)).unwrap();
        assert_eq!(history.epochs.len(), 1 + patience);
        assert_eq!(ev.calls, 1 + patience);
        assert_eq!(history.best_epoch, 1);
    }
}

#[test]
fn best_model_is_the_max_metric_epoch() {
    let data = samples(2, 2);
    let script = vec![0.1, 0.3, 0.2, 0.3, 0.25, 0.29, 0.1, 0.0, 0.0];
    let run = |max_epochs| {
        let mut ev = Scripted { values: script.clone(), calls: 0 };
        let model = build_model(VariantKind::Rgbd, &arch(), 4).unwrap();
        train(model, &data, &mut ev, &cfg(3, max_epochs)).unwrap()
    };
    let (best, history) = run(100);
    // ties do not count as improvements, so epoch 2 stays best and 3 stale epochs end training at 5
    assert_eq!(history.best_epoch, 2);
    assert_eq!(history.epochs.len(), 5);
    assert_eq!(history.best().val_map, 0.3);
    // the retained weights equal those after epoch 2 of an identical run
    let (at_two, _) = run(2);
    assert_eq!(best.params(), at_two.params());
}

#[test]
fn max_epochs_caps_training() {
    let data = samples(3, 2);
    let mut ev = Scripted { values: (1..=50).map(|i| i as f64 / 50.0).collect(), calls: 0 };
    let model = build_model(VariantKind::Rgbd, &arch(), 0).unwrap();
    let (_, history) = train(model, &data, &mut ev, &cfg(2, 7)).unwrap();
    assert_eq!(history.epochs.len(), 7);
    assert_eq!(history.best_epoch, 7);
}

#[test]
fn training_replays_exactly() {
    let data = samples(4, 3);
    let go = || {
        let mut ev = Scripted { values: vec![0.1, 0.2, 0.3, 0.4], calls: 0 };
        let model = build_model(VariantKind::Rgbd, &arch(), 9).unwrap();
        train(model, &data, &mut ev, &cfg(2, 4)).unwrap()
    };
    let (a, ha) = go();
    let (b, hb) = go();
    assert_eq!(a.params(), b.params());
    assert!(ha.same_trajectory(&hb));
}

#[test]
fn repeated_runs_equal_individual_runs() {
    let splits = PreparedSplits { train: samples(5, 2), val: samples(6, 1), test: samples(7, 1) };
    let c = TrainConfig { seed: 40, ..cfg(1, 2) };
    let predict = PredictOptions::default();
    let eval = EvalOptions::default();
    let all = run_repeated(VariantKind::Rgbd, &splits, &arch(), &c, &predict, &eval, 3).unwrap();
    assert_eq!(all.len(), 3);
    for (i, out) in all.iter().enumerate() {
        assert_eq!((out.run_index, out.seed), (i, 40 + i as u64));
        let single = run_single(VariantKind::Rgbd, &splits, &arch(), &c, &predict, &eval, i).unwrap();
        assert_eq!(single.model.params(), out.model.params());
        assert_eq!(single.test_report, out.test_report);
    }
    assert_ne!(all[0].model.params(), all[1].model.params());
}

#[test]
fn empty_splits_rejected() {
    let splits = PreparedSplits { train: samples(8, 1), val: Vec::new(), test: samples(9, 1) };
    let r = run_single(VariantKind::Rgbd, &splits, &arch(), &cfg(1, 1), &PredictOptions::default(), &EvalOptions::default(), 0);
    assert!(matches!(r, Err(TrainError::EmptySplit(_))));
}

/// Number of ground-truth boxes found by a same-class detection at IoU >= 0.9.
fn tight_matches(model: &DetectorModel, samples: &[Sample]) -> (usize, usize) {
    let preds = predict_all(model, samples, &PredictOptions::default()).unwrap();
    let (mut tight, mut total) = (0, 0);
    for (sample, dets) in samples.iter().zip(&preds) {
        for (gt, &class) in sample.targets.boxes.iter().zip(&sample.targets.classes) {
            let same: Vec<_> = dets.iter().filter(|d| d.class_id == class).copied().collect();
            tight += match_detections(&same, std::slice::from_ref(gt), 0.9).true_positives();
            total += 1;
        }
    }
    (tight, total)
}

struct TightFraction<'a>(&'a [Sample]);

impl Evaluator for TightFraction<'_> {
    fn evaluate(&mut self, model: &DetectorModel, _epoch: usize) -> Result<RunMetrics, TrainError> {
        let (tight, total) = tight_matches(model, self.0);
        let f = tight as f64 / total as f64;
        Ok(RunMetrics { map_50: f, mean_precision: f })
    }
}

#[test]
fn overfit_single_scene_matches_annotations() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut scene = common::small_scene_config();
    scene.objects_per_scene = [3, 3];
    common::build_fixture(root, &scene, 7, 1);
    let dataset = load_coco(&root.join("annotations.json"), root).unwrap();
    let ids = dataset.ids();
    let split = DatasetSplit { seed: 0, train: ids.clone(), val: ids.clone(), test: ids };
    let (data, _) = pipeline::prepare_splits(&dataset, &split, VariantKind::Rgbd, 1).unwrap();
    let c = TrainConfig { learning_rate: 0.01, batch_size: 1, max_epochs: 200, patience_epochs: 200, ..TrainConfig::default() };
    let model = build_model(VariantKind::Rgbd, &common::tiny_arch(), 0).unwrap();
    let (best, _) = train(model, &data.train, &mut TightFraction(&data.train), &c).unwrap();
    assert_eq!(tight_matches(&best, &data.train), (3, 3));
}
