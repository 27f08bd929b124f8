mod common;

use changefield::pipeline::mean_psnr;
use changefield::render::render_image;
use changefield::scene::{make_trajectory, tabletop_scene, TrajectorySpec};
use changefield::voxel::{train, TrainConfig, TrainingView, VoxelGridField};
use changefield::Intrinsics;

fn views(spec: &TrajectorySpec, k: usize) -> Vec<TrainingView> {
    let scene = tabletop_scene();
    make_trajectory(spec)
        .unwrap()
        .into_iter()
        .map(|camera| TrainingView { camera, image: render_image(&scene, &camera, k).unwrap() })
        .collect()
}

#[test]
fn windowed_loss_decreases_on_small_scene() {
    let config = common::example_config();
    let capture = TrajectorySpec { intrinsics: Intrinsics::centered(48, 36, 57.0), ..config.capture };
    let data = views(&capture, 64);
    let cfg = TrainConfig {
        iterations: 300,
        learning_rate: 3e5,
        rays_per_batch: 256,
        samples_per_ray: 32,
        seed: 5,
        density_reg: 0.0,
    };
    let init = VoxelGridField::new([16; 3], tabletop_scene().bounds).unwrap();
    let (_, log) = train(&data, &cfg, init).unwrap();
    let window = |i: usize| log.losses[i * 100..(i + 1) * 100].iter().sum::<f64>() / 100.0;
    assert!(window(1) < window(0), "{} vs {}", window(1), window(0));
    assert!(window(2) < window(1), "{} vs {}", window(2), window(1));
}

#[test]
fn forward_facing_capture_reaches_20_db() {
    let config = common::example_config();
    let capture = TrajectorySpec { seed: 1, ..config.capture.clone() };
    let heldout = TrajectorySpec { seed: 2, ..config.test.clone() };
    let train_views = views(&capture, config.render_samples);
    assert_eq!(train_views.len(), 20);
    let test_views = views(&heldout, config.render_samples);
    let cfg = TrainConfig {
        iterations: 800,
        learning_rate: 3e5,
        rays_per_batch: 1024,
        samples_per_ray: 64,
        seed: 3,
        density_reg: 0.0,
    };
    let init = VoxelGridField::new(config.grid.resolution, tabletop_scene().bounds).unwrap();
    let (field, _) = train(&train_views, &cfg, init).unwrap();
    let psnr = mean_psnr(&field, &test_views[..4], 64).unwrap();
    assert!(psnr >= 20.0, "held-out PSNR {psnr:.2} dB");
}
