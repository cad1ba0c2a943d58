mod common;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rgbd_fusion::dataset::{
    class_balance, derive_variant_dataset, export_coco, generate_fixture_dataset, generate_synthetic_scene,
    manifest_class_counts, parse_coco, split_ids, split_is_partition, SceneConfig, SynthManifest, NUM_CLASSES,
};
use rgbd_fusion::depth::{point_cloud_to_depth_map, PointCloud};
use rgbd_fusion::fusion::VariantKind;

#[test]
fn coco_counts_match_generator_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::small_scene_config();
    let dataset = generate_fixture_dataset(&cfg, 3, 20, dir.path()).unwrap();
    let manifest = SynthManifest::load(&dir.path().join("manifest.json")).unwrap();
    let loaded = rgbd_fusion::dataset::load_coco(&dir.path().join("annotations.json"), dir.path()).unwrap();
    assert_eq!(loaded.examples.len(), 20);
    assert_eq!(loaded.annotation_count(), manifest.annotation_count());
    assert_eq!(loaded, dataset);
    let mut tally: BTreeMap<usize, usize> = BTreeMap::new();
    for a in loaded.examples.iter().flat_map(|e| &e.annotations) {
        *tally.entry(a.class_id).or_default() += 1;
    }
    assert_eq!(tally, manifest_class_counts(&manifest));
    let balance = class_balance(&loaded);
    for (c, n) in balance.counts.iter().enumerate() {
        assert_eq!(*n, tally.get(&c).copied().unwrap_or(0));
    }
}

#[test]
fn coco_export_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = generate_fixture_dataset(&common::small_scene_config(), 4, 5, dir.path()).unwrap();
    let again = parse_coco(&export_coco(&dataset), dir.path()).unwrap();
    assert_eq!(again, dataset);
}

#[test]
fn splits_are_deterministic_partitions() {
    let ids: Vec<u64> = (1..=301).collect();
    for seed in 0..100 {
        let a = split_ids(&ids, (226, 45, 30), seed).unwrap();
        let b = split_ids(&ids, (226, 45, 30), seed).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (226, 45, 30));
        assert!(split_is_partition(&a, &ids));
    }
    assert_ne!(split_ids(&ids, (226, 45, 30), 0).unwrap(), split_ids(&ids, (226, 45, 30), 1).unwrap());
    assert!(split_ids(&ids, (226, 45, 31), 0).is_err());
}

#[test]
fn variants_share_examples_and_balance() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = generate_fixture_dataset(&common::small_scene_config(), 5, 6, dir.path()).unwrap();
    let views: Vec<_> = VariantKind::ALL.iter().map(|v| derive_variant_dataset(&dataset, *v)).collect();
    for v in &views[1..] {
        assert_eq!(v.examples(), views[0].examples());
        assert_eq!(v.class_balance(), views[0].class_balance());
    }
}

/// Centers (pixel-edge coordinates) of the extreme pixels whose rendered color
/// differs from a flat background.
fn painted_rect(img: &image::RgbImage, bg: [u8; 3]) -> Option<(f64, f64, f64, f64)> {
    let mut r: Option<(u32, u32, u32, u32)> = None;
    for (x, y, p) in img.enumerate_pixels() {
        if p.0 != bg {
            r = Some(match r {
                None => (x, y, x, y),
                Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x), d.max(y)),
            });
        }
    }
    r.map(|(a, b, c, d)| (a as f64 + 0.5, b as f64 + 0.5, c as f64 + 0.5, d as f64 + 0.5))
}

#[test]
fn annotations_enclose_rendered_objects() {
    let mut cfg = SceneConfig::default();
    cfg.objects_per_scene = [1, 1];
    cfg.background_noise = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..40 {
        let scene = generate_synthetic_scene(rng.random(), &cfg).unwrap();
        assert_eq!(scene.annotations.len(), 1);
        let b = scene.annotations[0].bbox;
        let (x0, y0, x1, y1) = painted_rect(&scene.rgb, cfg.background_color).unwrap();
        // painted pixels are those whose centers see the object, so the extreme
        // centers sit inside the outline; a thin corner can fall between two
        // rows of centers, so they may sit up to two pixels in from an edge
        assert!(x0 >= b.x_min - 1e-9 && y0 >= b.y_min - 1e-9 && x1 <= b.x_max + 1e-9 && y1 <= b.y_max + 1e-9, "{b:?} vs {:?}", (x0, y0, x1, y1));
        assert!(x0 - b.x_min < 2.0 && y0 - b.y_min < 2.0 && b.x_max - x1 < 2.0 && b.y_max - y1 < 2.0, "{b:?} vs {:?}", (x0, y0, x1, y1));
        assert!(b.x_min >= cfg.border_margin && b.x_max <= cfg.intrinsics.width as f64 - cfg.border_margin);
    }
}

#[test]
fn every_object_has_cloud_points_and_depth() {
    let cfg = common::small_scene_config();
    let calib = cfg.calibration().unwrap();
    for seed in 0..20 {
        let scene = generate_synthetic_scene(seed, &cfg).unwrap();
        let map = point_cloud_to_depth_map(&scene.cloud, &calib);
        for (obj, ann) in scene.objects.iter().zip(&scene.annotations) {
            assert!(obj.cloud_points >= 1 && obj.visible_pixels >= 1);
            assert_eq!(obj.class_id, ann.class_id);
            // some pixel inside the box sees the raised object, not the table
            let raised = (ann.bbox.y_min as u32..ann.bbox.y_max.ceil() as u32)
                .flat_map(|v| (ann.bbox.x_min as u32..ann.bbox.x_max.ceil() as u32).map(move |u| (u, v)))
                .filter(|&(u, v)| u < map.width() && v < map.height())
                .any(|(u, v)| {
                    let d = map.get(u, v);
                    d > 0.0 && d < cfg.table_distance - obj.height / 2.0
                });
            assert!(raised, "object of class {} has no raised depth", obj.class_id);
        }
    }
}

#[test]
fn same_seed_same_scene() {
    let cfg = SceneConfig::low_contrast();
    let a = generate_synthetic_scene(11, &cfg).unwrap();
    let b = generate_synthetic_scene(11, &cfg).unwrap();
    assert_eq!(a.rgb, b.rgb);
    assert_eq!(a.cloud, b.cloud);
    assert_eq!(a.annotations, b.annotations);
    assert!(a.annotations.iter().all(|x| x.class_id < NUM_CLASSES));
    let empty = PointCloud::new(Vec::new());
    assert_ne!(a.cloud, empty);
}
