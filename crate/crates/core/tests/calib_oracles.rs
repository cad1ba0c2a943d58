mod common;

use common::oracles::nalgebra_projection;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rgbd_fusion::calib::{
    load_calibration, project_point, prune_calibration_pairs, CalibError, CalibrationBundle, CameraIntrinsics, PairError,
    RigidTransform,
};

#[test]
fn rotation_about_z_fixture_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("calib.json");
    std::fs::write(
        &path,
        r#"{"intrinsics":{"fx":1000,"fy":1000,"cx":960,"cy":600,"width":1920,"height":1200},
            "extrinsic":[0,-1,0,0.1, 1,0,0,-0.2, 0,0,1,0.3, 0,0,0,1]}"#,
    )
    .unwrap();
    let calib = load_calibration(&path).unwrap();
    let (s, c) = std::f64::consts::FRAC_PI_2.sin_cos();
    let expected = [[c, -s, 0.0, 0.1], [s, c, 0.0, -0.2], [0.0, 0.0, 1.0, 0.3], [0.0, 0.0, 0.0, 1.0]];
    for i in 0..4 {
        for j in 0..4 {
            assert!((calib.extrinsics.matrix()[i][j] - expected[i][j]).abs() < 1e-15);
        }
    }
}

#[test]
fn bad_extrinsics_rejected() {
    let not_rigid = [2.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0];
    assert!(matches!(RigidTransform::from_row_major(&not_rigid), Err(CalibError::InvalidExtrinsics(_))));
    assert!(matches!(RigidTransform::from_row_major(&[1.0; 12]), Err(CalibError::InvalidExtrinsics(_))));
}

#[test]
fn projection_matches_homogeneous_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut max_err: f64 = 0.0;
    let mut compared = 0;
    for _ in 0..100 {
        let calib = common::random_bundle(&mut rng);
        for _ in 0..100 {
            let p = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-0.5..5.0)];
            let ours = calib.project_continuous(p);
            let oracle = nalgebra_projection(p, &calib);
            assert_eq!(ours.is_some(), oracle.is_some());
            if let (Some(a), Some(b)) = (ours, oracle) {
                max_err = max_err.max((a.0 - b.0).abs()).max((a.1 - b.1).abs()).max((a.2 - b.2).abs());
                compared += 1;
                let hit = project_point(p, &calib);
                let k = &calib.intrinsics;
                let (u, v) = (b.0.round(), b.1.round());
                let inside = u >= 0.0 && v >= 0.0 && u < k.width as f64 && v < k.height as f64;
                if (b.0 - b.0.floor() - 0.5).abs() > 1e-6 && (b.1 - b.1.floor() - 0.5).abs() > 1e-6 {
                    assert_eq!(hit.is_some(), inside);
                    if let Some(h) = hit {
                        assert_eq!((h.u as f64, h.v as f64), (u, v));
                    }
                }
            }
        }
    }
    assert!(compared > 5000);
    assert!(max_err < 1e-9, "max error {max_err}");
}

#[test]
fn point_behind_camera_is_dropped() {
    let k = CameraIntrinsics { fx: 100.0, fy: 100.0, cx: 50.0, cy: 50.0, width: 100, height: 100 };
    let calib = CalibrationBundle::new(k, RigidTransform::identity()).unwrap();
    assert!(project_point([0.0, 0.0, -1.0], &calib).is_none());
    assert!(project_point([0.0, 0.0, 0.0], &calib).is_none());
    let hit = project_point([0.0, 0.0, 2.0], &calib).unwrap();
    assert_eq!((hit.u, hit.v, hit.z), (50, 50, 2.0));
}

fn brute_force_prune(errors: &[PairError], max_t: f64, max_r: f64) -> Vec<PairError> {
    let mut kept = errors.to_vec();
    loop {
        let before = kept.len();
        kept.retain(|p| p.translation_error < max_t && p.rotation_error < max_r);
        if kept.len() == before {
            return kept;
        }
    }
}

#[test]
fn pruning_matches_filter_oracle_on_sixty_pairs() {
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs: Vec<PairError> = (0..60)
            .map(|i| PairError {
                pair_id: format!("pair_{i:02}"),
                translation_error: rng.random_range(0.0..0.009),
                rotation_error: rng.random_range(0.0..9.0),
            })
            .collect();
        let oracle = brute_force_prune(&pairs, 0.0045, 4.5);
        match prune_calibration_pairs(&pairs, 0.0045, 4.5) {
            Ok(kept) => assert_eq!(kept, oracle),
            Err(CalibError::EmptyResult) => assert!(oracle.is_empty()),
            Err(e) => panic!("{e}"),
        }
    }
}

fn axis_angle() -> impl Strategy<Value = RigidTransform> {
    (-1.0..1.0f64, -1.0..1.0f64, 0.1..1.0f64, -3.0..3.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
        .prop_map(|(a, b, c, ang, x, y, z)| RigidTransform::from_axis_angle([a, b, c], ang, [x, y, z]).unwrap())
}

fn intrinsics() -> impl Strategy<Value = CameraIntrinsics> {
    (50.0..3000.0f64, 50.0..3000.0f64, 0.0..1.0f64, 0.0..1.0f64).prop_map(|(fx, fy, a, b)| CameraIntrinsics {
        fx,
        fy,
        cx: a * 1919.0,
        cy: b * 1199.0,
        width: 1920,
        height: 1200,
    })
}

proptest! {
    #[test]
    fn projection_scale_invariance(k in intrinsics(), x in -2.0..2.0f64, y in -2.0..2.0f64, z in 0.01..10.0f64, lambda in 0.01..100.0f64) {
        let calib = CalibrationBundle::new(k, RigidTransform::identity()).unwrap();
        let (u1, v1, z1) = calib.project_continuous([x, y, z]).unwrap();
        let (u2, v2, z2) = calib.project_continuous([lambda * x, lambda * y, lambda * z]).unwrap();
        prop_assert!((u1 - u2).abs() < 1e-9 * (1.0 + u1.abs()));
        prop_assert!((v1 - v2).abs() < 1e-9 * (1.0 + v1.abs()));
        prop_assert!((z2 - lambda * z1).abs() < 1e-12 * z2);
    }

    #[test]
    fn back_projection_round_trip(k in intrinsics(), u in 0u32..1920, v in 0u32..1200, z in 0.05..20.0f64) {
        let calib = CalibrationBundle::new(k, RigidTransform::identity()).unwrap();
        let p = k.back_project(u as f64, v as f64, z);
        let (uc, vc, _) = calib.project_continuous(p).unwrap();
        prop_assert!((uc - u as f64).abs() < 1e-9);
        prop_assert!((vc - v as f64).abs() < 1e-9);
        let hit = project_point(p, &calib).unwrap();
        prop_assert_eq!((hit.u, hit.v), (u, v));
    }

    #[test]
    fn transform_and_inverse_compose_to_identity(t in axis_angle(), k in intrinsics(), x in -1.0..1.0f64, y in -1.0..1.0f64, z in 0.5..5.0f64) {
        let both = CalibrationBundle::new(k, t.compose(&t.inverse())).unwrap();
        let ident = CalibrationBundle::new(k, RigidTransform::identity()).unwrap();
        let q = both.extrinsics.apply([x, y, z]);
        for (a, b) in q.iter().zip([x, y, z]) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        let (ua, va, _) = both.project_continuous([x, y, z]).unwrap();
        let (ub, vb, _) = ident.project_continuous([x, y, z]).unwrap();
        prop_assert!((ua - ub).abs() < 1e-6 && (va - vb).abs() < 1e-6);
    }

    #[test]
    fn pruning_output_is_compliant_subset(errs in prop::collection::vec((0.0..0.01f64, 0.0..10.0f64), 0..40), mt in 0.001..0.01f64, mr in 1.0..10.0f64) {
        let pairs: Vec<PairError> = errs.iter().enumerate()
            .map(|(i, &(t, r))| PairError { pair_id: i.to_string(), translation_error: t, rotation_error: r })
            .collect();
        match prune_calibration_pairs(&pairs, mt, mr) {
            Ok(kept) => {
                prop_assert!(!kept.is_empty());
                for p in &kept {
                    prop_assert!(pairs.contains(p));
                    prop_assert!(p.translation_error < mt && p.rotation_error < mr);
                }
            }
            Err(CalibError::EmptyResult) => prop_assert!(pairs.iter().all(|p| p.translation_error >= mt || p.rotation_error >= mr)),
            Err(e) => prop_assert!(false, "unexpected error {}", e),
        }
    }
}
