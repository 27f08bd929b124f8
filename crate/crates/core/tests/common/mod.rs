#![allow(dead_code)]

use std::path::{Path, PathBuf};

use changefield::pipeline::PipelineConfig;
use changefield::scene::TrajectoryMode;
use changefield::Intrinsics;

pub fn example_config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/moved_box.toml")
}

pub fn example_config() -> PipelineConfig {
    PipelineConfig::load(&example_config_path()).expect("example config loads")
}

/// The example scene at thumbnail size with a few views and a short
/// training run.
pub fn tiny_config(output: &Path) -> PipelineConfig {
    let mut c = example_config();
    c.output = output.to_path_buf();
    c.render_samples = 64;
    for spec in [&mut c.capture, &mut c.test] {
        spec.intrinsics = Intrinsics::centered(48, 36, 57.0);
    }
    if let TrajectoryMode::ForwardFacing { count, rows, .. } = &mut c.capture.mode {
        (*count, *rows) = (6, 2);
    }
    if let TrajectoryMode::ForwardFacing { count, rows, .. } = &mut c.test.mode {
        (*count, *rows) = (3, 1);
    }
    c.grid.resolution = [16; 3];
    c.train.iterations = 30;
    c.train.rays_per_batch = 256;
    c.train.samples_per_ray = 32;
    c.detect.samples = 48;
    c
}
