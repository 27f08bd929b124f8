mod common;

use changefield::change_render::{render_change_map, render_change_map_with, select_center_point, ChangeMap, DetectConfig};
use changefield::detect::{change_representation, per_view_indicators, sample_view_set};
use changefield::render::Schedule;
use changefield::scene::{
    apply_edit, ground_truth_change_mask, make_trajectory, tabletop_edit, tabletop_scene, Primitive, SceneEdit, SceneSpec, Shape, Texture,
    TrajectorySpec,
};
use changefield::{Camera, Intrinsics, Ray, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_camera() -> Camera {
    Camera::look_at(
        Intrinsics::centered(84, 63, 100.0),
        Vec3::new(0.2, 0.1, 3.2),
        Vec3::new(0.0, -0.4, -0.2),
        Vec3::y(),
        1.0,
        6.0,
    )
    .unwrap()
}

fn detect_config() -> DetectConfig {
    common::example_config().detect
}

fn test_cameras() -> Vec<Camera> {
    let c = common::example_config();
    make_trajectory(&TrajectorySpec { seed: c.seeds().test, ..c.test }).unwrap()
}

/// First hit of the ray with a box, if any.
fn hit_box(ray: &Ray, center: Vec3, half: Vec3) -> Option<f64> {
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for a in 0..3 {
        let inv = 1.0 / ray.direction[a];
        let ta = (center[a] - half[a] - ray.origin[a]) * inv;
        let tb = (center[a] + half[a] - ray.origin[a]) * inv;
        t0 = t0.max(ta.min(tb));
        t1 = t1.min(ta.max(tb));
    }
    (t0 <= t1 && t1 > 0.0).then_some(t0.max(0.0))
}

fn hit_sphere(ray: &Ray, center: Vec3, r: f64) -> Option<f64> {
    let oc = ray.origin - center;
    let b = oc.dot(&ray.direction);
    let disc = b * b - (oc.norm_squared() - r * r);
    (disc >= 0.0).then(|| -b - disc.sqrt())
}

fn hit(ray: &Ray, p: &Primitive) -> Option<f64> {
    match p.shape {
        Shape::Box { center, half_extents } => hit_box(ray, center, half_extents),
        Shape::Sphere { center, radius } => hit_sphere(ray, center, radius),
    }
}

#[test]
fn recolor_mask_is_the_visible_silhouette() {
    let pre = tabletop_scene();
    let post = apply_edit(&pre, &SceneEdit::Recolor { id: 2, texture: Texture::solid(0.1, 0.2, 0.9) }).unwrap();
    let camera = small_camera();
    let k = 128;
    let gt = ground_truth_change_mask(&pre, &post, &camera, k).unwrap();
    let step = (camera.far - camera.near) / k as f64;
    let (mut excluded, mut compared) = (0, 0);
    for py in 0..camera.height() {
        for px in 0..camera.width() {
            let ray = camera.pixel_ray(px, py).unwrap();
            let sphere = hit(&ray, pre.primitive(2).unwrap());
            let other = pre.primitives.iter().filter(|p| p.id != 2).filter_map(|p| hit(&ray, p)).fold(f64::INFINITY, f64::min);
            let Shape::Sphere { center, radius } = pre.primitive(2).unwrap().shape else { unreachable!() };
            let miss_distance = (ray.origin - center).cross(&ray.direction).norm();
            // grazing rays and sphere/floor contact are resolved by sampling
            let ambiguous = (miss_distance - radius).abs() < 0.02 || sphere.is_some_and(|t| (t - other).abs() < 3.0 * step);
            if ambiguous {
                excluded += 1;
                continue;
            }
            compared += 1;
            let expected = sphere.is_some_and(|t| t < other);
            assert_eq!(gt.get(px, py), expected, "pixel ({px}, {py})");
        }
    }
    assert!(excluded * 10 < compared, "{excluded} excluded of {compared}");
}

#[test]
fn moved_box_mask_lies_in_both_footprints() {
    let pre = tabletop_scene();
    let post = apply_edit(&pre, &tabletop_edit()).unwrap();
    let camera = small_camera();
    let gt = ground_truth_change_mask(&pre, &post, &camera, 128).unwrap();
    let footprint = |scene: &SceneSpec| {
        let Shape::Box { center, half_extents } = scene.primitive(3).unwrap().shape else { unreachable!() };
        let (mut lo, mut hi) = ((f64::INFINITY, f64::INFINITY), (f64::NEG_INFINITY, f64::NEG_INFINITY));
        for c in 0..8 {
            let s = Vec3::new(
                if c & 1 == 0 { -1.0 } else { 1.0 },
                if c & 2 == 0 { -1.0 } else { 1.0 },
                if c & 4 == 0 { -1.0 } else { 1.0 },
            );
            let (u, v) = camera.project(&(center + half_extents.component_mul(&s))).unwrap();
            lo = (lo.0.min(u), lo.1.min(v));
            hi = (hi.0.max(u), hi.1.max(v));
        }
        (lo, hi)
    };
    let rects = [footprint(&pre), footprint(&post)];
    assert!(gt.count() > 200);
    for py in 0..camera.height() {
        for px in 0..camera.width() {
            if gt.get(px, py) {
                let (u, v) = (px as f64 + 0.5, py as f64 + 0.5);
                let inside = rects.iter().any(|(lo, hi)| u >= lo.0 - 1.0 && u <= hi.0 + 1.0 && v >= lo.1 - 1.0 && v <= hi.1 + 1.0);
                assert!(inside, "pixel ({px}, {py}) outside both box footprints");
            }
        }
    }
}

#[test]
fn map_agrees_with_per_view_decisions() {
    let pre = tabletop_scene();
    let post = apply_edit(&pre, &tabletop_edit()).unwrap();
    let camera = small_camera();
    let config = detect_config();
    let map = render_change_map(&pre, &post, &camera, &config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut changed_seen = 0;
    for _ in 0..100 {
        let (px, py) = (rng.random_range(0..camera.width()), rng.random_range(0..camera.height()));
        let ray = camera.pixel_ray(px, py).unwrap();
        let expected = match select_center_point(&pre, &post, &ray, config.samples).unwrap() {
            None => false,
            Some(center) => {
                let views = sample_view_set(config.view_mode, &center.position, &ray, config.views).unwrap();
                let window = config.window.resolve(&ray, config.samples).unwrap();
                let per_view: Vec<_> = views
                    .rays
                    .iter()
                    .map(|r| per_view_indicators(&change_representation(&pre, &post, &center.position, r, &window).unwrap(), &config.thresholds))
                    .collect();
                per_view.iter().all(|i| i.color) || per_view.iter().all(|i| i.density)
            }
        };
        changed_seen += expected as usize;
        assert_eq!(map.get(px, py), expected, "pixel ({px}, {py})");
    }
    assert!(changed_seen > 0);
}

#[test]
fn schedule_does_not_change_output() {
    let pre = tabletop_scene();
    let post = apply_edit(&pre, &tabletop_edit()).unwrap();
    let camera = small_camera();
    let config = detect_config();
    let serial = render_change_map_with(&pre, &post, &camera, &config, Schedule::Serial).unwrap();
    let parallel = render_change_map_with(&pre, &post, &camera, &config, Schedule::Parallel).unwrap();
    assert_eq!(serial, parallel);
}

fn subset(a: &ChangeMap, b: &ChangeMap) -> bool {
    a.values.iter().zip(&b.values).all(|(&x, &y)| !x || y)
}

#[test]
fn more_views_never_add_changes() {
    let pre = tabletop_scene();
    let post = apply_edit(&pre, &tabletop_edit()).unwrap();
    let camera = small_camera();
    let base = detect_config();
    let one = render_change_map(&pre, &post, &camera, &DetectConfig { views: 1, ..base }).unwrap();
    let five = render_change_map(&pre, &post, &camera, &DetectConfig { views: 5, ..base }).unwrap();
    assert!(subset(&five, &one));
    assert!(five.count() > 0);

    let mut strict = base;
    strict.thresholds.eps_c *= 2.0;
    strict.thresholds.eps_sigma *= 2.0;
    let strict_map = render_change_map(&pre, &post, &camera, &strict).unwrap();
    assert!(subset(&strict_map, &five));
}

#[test]
fn oracle_maps_match_ground_truth_on_a_test_view() {
    let pre = tabletop_scene();
    let post = apply_edit(&pre, &tabletop_edit()).unwrap();
    let camera = test_cameras()[3];
    let config = detect_config();
    let gt = ground_truth_change_mask(&pre, &post, &camera, config.samples).unwrap();
    let pred = render_change_map(&pre, &post, &camera, &config).unwrap();
    let m = changefield::metrics::pixel_metrics(&pred, &gt).unwrap();
    assert!(m.iou >= 0.9, "{m:?}");
}

#[test]
fn unchanged_scene_pair_is_silent() {
    let pre = tabletop_scene();
    let camera = small_camera();
    let map = render_change_map(&pre, &pre.clone(), &camera, &detect_config()).unwrap();
    assert_eq!(map.count(), 0);
    assert_eq!(ground_truth_change_mask(&pre, &pre, &camera, 64).unwrap().count(), 0);
}
