//! Helpers shared by the integration tests.
#![allow(dead_code)]

pub mod oracles;

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rgbd_fusion::calib::{CalibrationBundle, CameraIntrinsics, RigidTransform};
use rgbd_fusion::dataset::{generate_fixture_dataset, SceneConfig};
use rgbd_fusion::detect::ArchConfig;
use rgbd_fusion::pipeline;

/// A random but valid calibration with a full rigid extrinsic.
pub fn random_bundle(rng: &mut ChaCha8Rng) -> CalibrationBundle {
    let width = rng.random_range(32..2000u32);
    let height = rng.random_range(32..1300u32);
    let k = CameraIntrinsics {
        fx: rng.random_range(100.0..2000.0),
        fy: rng.random_range(100.0..2000.0),
        cx: rng.random_range(0.0..width as f64),
        cy: rng.random_range(0.0..height as f64),
        width,
        height,
    };
    let axis = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.1..1.0)];
    let angle = rng.random_range(-0.3..0.3);
    let t = [rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)];
    CalibrationBundle::new(k, RigidTransform::from_axis_angle(axis, angle, t).unwrap()).unwrap()
}

/// Small scene settings that keep fixture training fast on one core.
pub fn small_scene_config() -> SceneConfig {
    let mut cfg = SceneConfig::default();
    cfg.intrinsics = CameraIntrinsics { fx: 150.0, fy: 150.0, cx: 48.0, cy: 36.0, width: 96, height: 72 };
    cfg.table_distance = 0.3;
    cfg.objects_per_scene = [1, 3];
    cfg
}

/// Architecture small enough for quick tests.
pub fn tiny_arch() -> ArchConfig {
    ArchConfig {
        backbone_widths: vec![8, 16, 16],
        rpn_channels: 16,
        anchor_scales: vec![12.0, 24.0],
        head_hidden: 32,
        ..ArchConfig::default()
    }
}

/// synth + project + pack under `root`.
pub fn build_fixture(root: &Path, cfg: &SceneConfig, seed: u64, n: usize) {
    generate_fixture_dataset(cfg, seed, n, root).unwrap();
    let calib = cfg.calibration().unwrap();
    let stats = pipeline::project_clouds(&calib, &root.join("cloud"), &root.join("depth")).unwrap();
    pipeline::pack_directory(&root.join("rgb"), &root.join("depth"), &stats, &root.join("rgbd")).unwrap();
}

/// Runs the `rgbd` binary and returns its exit code and stdout.
pub fn rgbd(args: &[&str]) -> (i32, String) {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_rgbd"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("rgbd binary runs");
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stdout).into_owned())
}

/// Path argument as a string.
pub fn arg(p: &Path) -> String {
    p.display().to_string()
}

/// SHA-256 of every file under `dir`, keyed by relative path.
pub fn tree_digest(dir: &Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    use sha2::{Digest, Sha256};
    let mut out = std::collections::BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, Sha256::digest(std::fs::read(&p).unwrap()).to_vec());
            }
        }
    }
    out
}

/// A pipeline config for quick CLI training runs on small fixtures.
pub fn quick_train_toml(max_epochs: usize) -> String {
    format!(
        "variant = \"rgbd\"\nruns = 1\n[train]\nmax_epochs = {max_epochs}\npatience_epochs = 2\nbatch_size = 2\nlearning_rate = 0.01\n\
         [arch]\nbackbone_widths = [8, 16, 16]\nrpn_channels = 16\nanchor_scales = [12.0, 24.0]\nhead_hidden = 32\n"
    )
}
