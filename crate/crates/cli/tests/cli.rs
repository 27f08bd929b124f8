use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use changefield::pipeline::{Backend, PipelineConfig};
use changefield::scene::TrajectoryMode;
use changefield::Intrinsics;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_changefield"))
}

/// Thumbnail version of the bundled example, written next to `out`.
fn write_config(dir: &Path, edit: impl FnOnce(&mut PipelineConfig)) -> PathBuf {
    let example = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/moved_box.toml");
    let mut c = PipelineConfig::load(&example).unwrap();
    c.output = dir.join("out");
    c.backend = Backend::Oracle;
    c.render_samples = 48;
    for spec in [&mut c.capture, &mut c.test] {
        spec.intrinsics = Intrinsics::centered(32, 24, 38.0);
    }
    if let TrajectoryMode::ForwardFacing { count, rows, .. } = &mut c.capture.mode {
        (*count, *rows) = (4, 2);
    }
    if let TrajectoryMode::ForwardFacing { count, rows, .. } = &mut c.test.mode {
        (*count, *rows) = (2, 1);
    }
    c.grid.resolution = [8; 3];
    c.train.iterations = 5;
    c.train.rays_per_batch = 64;
    c.train.samples_per_ray = 16;
    c.detect.samples = 32;
    edit(&mut c);
    let path = dir.join("config.toml");
    std::fs::write(&path, c.to_toml()).unwrap();
    path
}

fn run(args: &[&str], config: &Path) -> Output {
    bin().args(args).arg("--config").arg(config).output().unwrap()
}

#[test]
fn full_oracle_run_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), |_| {});
    for stage in ["generate", "train", "detect", "evaluate"] {
        let out = run(&[stage], &config);
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    assert!(dir.path().join("out/eval/report.json").is_file());

    let out = run(&["detect", "--views", "1"], &config);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("view_001.png"));
}

#[test]
fn overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), |_| {});
    let other = dir.path().join("elsewhere");
    let out = run(&["generate", "--seed", "99", "--out", other.to_str().unwrap()], &config);
    assert!(out.status.success());
    let snap = PipelineConfig::load(&other.join("dataset/config.toml")).unwrap();
    assert_eq!(snap.seed, 99);
    let out = run(&["train", "--backend", "voxel", "--out", other.to_str().unwrap()], &config);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(other.join("train/field_post.vgf").is_file());
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    assert_eq!(run(&["generate"], &missing).status.code(), Some(2));
    let config = write_config(dir.path(), |_| {});
    // no dataset yet
    assert_eq!(run(&["train"], &config).status.code(), Some(2));
    let garbage = dir.path().join("bad.toml");
    std::fs::write(&garbage, "seed = [").unwrap();
    assert_eq!(run(&["generate"], &garbage).status.code(), Some(2));
}

#[test]
fn data_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), |_| {});
    assert!(run(&["generate"], &config).status.success());
    let pred = dir.path().join("pred");
    std::fs::create_dir(&pred).unwrap();
    let out = bin()
        .args(["evaluate", "--config"])
        .arg(&config)
        .arg("--pred")
        .arg(&pred)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn divergence_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), |c| {
        c.backend = Backend::Voxel;
        c.train.learning_rate = 1e300;
    });
    assert!(run(&["generate"], &config).status.success());
    let out = run(&["train"], &config);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}
