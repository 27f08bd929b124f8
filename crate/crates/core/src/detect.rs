//! Per-point change detection between two radiance fields.
//!
//! For a point `x` seen along one view ray, both fields are sampled on a
//! short window of the ray centered on `x`. Each sample contributes the
//! absolute difference of the fields' weighted colors (`|w_a c_a - w_b c_b|`,
//! channels summed) and weighted densities (`|w_a s_a - w_b s_b|`), where the
//! weights `w = T * alpha` accumulate transmittance from the start of the
//! ray. The L1 norms of those vectors are thresholded per view, and a point
//! is only reported as changed when every sampled view agrees.

use serde::{Deserialize, Serialize};

use crate::camera::{Ray, Vec3};
use crate::error::{Error, Result};
use crate::render::{composite_weights_from, query_samples, RadianceField};
use crate::scene::rotation_about_up;

/// Color thresholds are given on the 0–255 scale and compared against
/// unit-range sums after dividing by 255.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub eps_c: f64,
    pub eps_sigma: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            eps_c: 60.0,
            eps_sigma: 300.0,
        }
    }
}

impl Thresholds {
    pub fn new(eps_c: f64, eps_sigma: f64) -> Result<Self> {
        let t = Self { eps_c, eps_sigma };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps_c > 0.0 && self.eps_sigma > 0.0) {
            return Err(Error::invalid("thresholds must be positive"));
        }
        Ok(())
    }

    /// Color threshold on the unit scale.
    pub fn color_unit(&self) -> f64 {
        self.eps_c / 255.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ChangeIndicators {
    pub color: bool,
    pub density: bool,
}

impl ChangeIndicators {
    pub fn changed(&self) -> bool {
        self.color || self.density
    }

    fn and(self, other: Self) -> Self {
        Self {
            color: self.color && other.color,
            density: self.density && other.density,
        }
    }
}

/// Weighted per-sample differences around a point for one view.
#[derive(Debug, Clone, PartialEq)]
pub struct ChangeRepresentation {
    pub color_diffs: Vec<f64>,
    pub density_diffs: Vec<f64>,
    pub view: Vec3,
}

impl ChangeRepresentation {
    pub fn color_norm(&self) -> f64 {
        self.color_diffs.iter().sum()
    }

    pub fn density_norm(&self) -> f64 {
        self.density_diffs.iter().sum()
    }
}

/// How the sample window around a point is laid out, relative to the ray's
/// own sample spacing `(far - near) / K`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub samples: usize,
    /// Window half-width in units of the ray spacing.
    pub half_width_factor: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            samples: 16,
            half_width_factor: 2.0,
        }
    }
}

impl WindowConfig {
    pub fn resolve(&self, ray: &Ray, k: usize) -> Result<Window> {
        if k == 0 {
            return Err(Error::invalid("sample count must be at least 1"));
        }
        let step = (ray.far - ray.near) / k as f64;
        Window::new(self.samples, self.half_width_factor * step, step)
    }
}

/// Absolute window geometry: `samples` evenly spaced points within
/// `half_width` of the center, and the step used to accumulate transmittance
/// from the ray start up to the window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window {
    pub samples: usize,
    pub half_width: f64,
    pub prefix_step: f64,
}

impl Window {
    pub fn new(samples: usize, half_width: f64, prefix_step: f64) -> Result<Self> {
        if samples == 0 || !(half_width > 0.0) || !(prefix_step > 0.0) {
            return Err(Error::invalid("window needs samples >= 1 and positive widths"));
        }
        Ok(Self {
            samples,
            half_width,
            prefix_step,
        })
    }
}

struct WindowLayout {
    prefix_positions: Vec<Vec3>,
    prefix_delta: f64,
    window_positions: Vec<Vec3>,
    window_delta: f64,
}

fn layout(x: &Vec3, ray: &Ray, window: &Window) -> Result<WindowLayout> {
    let t_x = (x - ray.origin).dot(&ray.direction);
    let off_ray = (x - ray.at(t_x)).norm();
    if off_ray > 1e-6 {
        return Err(Error::invalid(format!("point is {off_ray:e} off the view ray")));
    }
    let (start, end) = (t_x - window.half_width, t_x + window.half_width);
    if start < ray.near || end > ray.far {
        return Err(Error::invalid(format!(
            "window [{start}, {end}] leaves the ray interval [{}, {}]",
            ray.near, ray.far
        )));
    }
    let prefix_len = start - ray.near;
    let n_prefix = (prefix_len / window.prefix_step).ceil() as usize;
    let prefix_delta = if n_prefix > 0 { prefix_len / n_prefix as f64 } else { 0.0 };
    let prefix_positions = (0..n_prefix)
        .map(|i| ray.at(ray.near + (i as f64 + 0.5) * prefix_delta))
        .collect();
    let window_delta = 2.0 * window.half_width / window.samples as f64;
    let window_positions = (0..window.samples)
        .map(|i| ray.at(start + (i as f64 + 0.5) * window_delta))
        .collect();
    Ok(WindowLayout {
        prefix_positions,
        prefix_delta,
        window_positions,
        window_delta,
    })
}

struct WindowWeights {
    weights: Vec<f64>,
    colors: Vec<Vec3>,
    densities: Vec<f64>,
}

fn window_weights<F: RadianceField + ?Sized>(field: &F, ray: &Ray, layout: &WindowLayout) -> Result<WindowWeights> {
    let prefix = query_samples(field, &layout.prefix_positions, &ray.direction)?;
    let depth: f64 = prefix.iter().map(|s| s.density * layout.prefix_delta).sum();
    let samples = query_samples(field, &layout.window_positions, &ray.direction)?;
    let densities: Vec<f64> = samples.iter().map(|s| s.density).collect();
    let deltas = vec![layout.window_delta; samples.len()];
    let w = composite_weights_from(&densities, &deltas, depth)?;
    Ok(WindowWeights {
        weights: w.weights,
        colors: samples.iter().map(|s| s.color).collect(),
        densities,
    })
}

/// Weighted color and density differences of the two fields around `x`
/// along `view_ray`.
pub fn change_representation<A, B>(
    field_a: &A,
    field_b: &B,
    x: &Vec3,
    view_ray: &Ray,
    window: &Window,
) -> Result<ChangeRepresentation>
where
    A: RadianceField + ?Sized,
    B: RadianceField + ?Sized,
{
    let layout = layout(x, view_ray, window)?;
    let a = window_weights(field_a, view_ray, &layout)?;
    let b = window_weights(field_b, view_ray, &layout)?;
    let n = layout.window_positions.len();
    let mut color_diffs = Vec::with_capacity(n);
    let mut density_diffs = Vec::with_capacity(n);
    for i in 0..n {
        let dc = a.colors[i] * a.weights[i] - b.colors[i] * b.weights[i];
        color_diffs.push(dc.abs().sum());
        density_diffs.push((a.weights[i] * a.densities[i] - b.weights[i] * b.densities[i]).abs());
    }
    Ok(ChangeRepresentation {
        color_diffs,
        density_diffs,
        view: view_ray.direction,
    })
}

/// Strict-inequality thresholding of the representation's L1 norms.
pub fn per_view_indicators(rep: &ChangeRepresentation, th: &Thresholds) -> ChangeIndicators {
    ChangeIndicators {
        color: rep.color_norm() > th.color_unit(),
        density: rep.density_norm() > th.eps_sigma,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ViewMode {
    /// The reference direction plus `V - 1` directions evenly spaced in
    /// azimuth on a cone of the given half-angle (radians) around it.
    ForwardFacing { cone_half_angle: f64 },
    /// `V` directions evenly spaced over `[-range, +range]` (radians) of
    /// rotation about the world vertical axis through the point.
    Surround { range: f64 },
}

impl ViewMode {
    pub fn surround() -> Self {
        ViewMode::Surround {
            range: std::f64::consts::FRAC_PI_2,
        }
    }
}

/// View rays that all pass through one point.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    pub rays: Vec<Ray>,
    pub mode: ViewMode,
}

/// Builds `count` view rays through `x`. Each ray keeps the reference ray's
/// distance from its origin to `x` and its depth interval.
pub fn sample_view_set(mode: ViewMode, x: &Vec3, reference: &Ray, count: usize) -> Result<ViewSet> {
    if count == 0 {
        return Err(Error::invalid("view count must be at least 1"));
    }
    let d = reference.direction;
    let dist = (x - reference.origin).norm();
    let directions: Vec<Vec3> = match mode {
        ViewMode::ForwardFacing { cone_half_angle } => {
            if count > 1 && !(cone_half_angle > 0.0) {
                return Err(Error::Degenerate("zero-width view cone cannot hold distinct directions".into()));
            }
            let helper = if d.y.abs() < 0.9 { Vec3::y() } else { Vec3::x() };
            let u = d.cross(&helper).normalize();
            let v = u.cross(&d);
            let ring = count - 1;
            std::iter::once(d)
                .chain((0..ring).map(|q| {
                    let phi = std::f64::consts::TAU * q as f64 / ring as f64;
                    let (s, c) = cone_half_angle.sin_cos();
                    (d * c + (u * phi.cos() + v * phi.sin()) * s).normalize()
                }))
                .collect()
        }
        ViewMode::Surround { range } => {
            if count > 1 && (d.x.hypot(d.z) < 1e-9 || !(range > 0.0)) {
                return Err(Error::Degenerate("rotation about the vertical axis leaves the direction unchanged".into()));
            }
            (0..count)
                .map(|q| {
                    let angle = if count == 1 {
                        0.0
                    } else {
                        -range + 2.0 * range * q as f64 / (count - 1) as f64
                    };
                    rotation_about_up(angle) * d
                })
                .collect()
        }
    };
    let rays = directions
        .into_iter()
        .map(|dir| Ray {
            origin: x - dir * dist,
            direction: dir,
            near: reference.near,
            far: reference.far,
        })
        .collect();
    Ok(ViewSet { rays, mode })
}

/// Indicators of `x` under every view, combined with logical AND.
pub fn detect_change_point<A, B>(
    field_a: &A,
    field_b: &B,
    x: &Vec3,
    views: &ViewSet,
    th: &Thresholds,
    window: &Window,
) -> Result<ChangeIndicators>
where
    A: RadianceField + ?Sized,
    B: RadianceField + ?Sized,
{
    if views.rays.is_empty() {
        return Err(Error::invalid("view set is empty"));
    }
    let mut acc = ChangeIndicators {
        color: true,
        density: true,
    };
    for ray in &views.rays {
        let rep = change_representation(field_a, field_b, x, ray, window)?;
        acc = acc.and(per_view_indicators(&rep, th));
        if !acc.changed() {
            break;
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::RadianceSample;
    use crate::scene::{apply_edit, Aabb, Primitive, SceneEdit, SceneSpec, Shape, Texture};
    use proptest::prelude::*;

    fn box_scene(color: Vec3) -> SceneSpec {
        SceneSpec::new(
            vec![Primitive {
                id: 1,
                shape: Shape::Box { center: Vec3::zeros(), half_extents: Vec3::repeat(0.5) },
                texture: Texture::Solid { color },
                density: 1000.0,
            }],
            0.0,
            Aabb::cube(2.0),
        )
        .unwrap()
    }

    fn front_ray() -> Ray {
        Ray::new(Vec3::new(0.0, 0.0, 3.0), Vec3::new(0.0, 0.0, -1.0), 1.0, 5.0).unwrap()
    }

    fn window() -> Window {
        WindowConfig::default().resolve(&front_ray(), 128).unwrap()
    }

    #[test]
    fn identical_fields_give_zero() {
        let s = box_scene(Vec3::x());
        let x = Vec3::new(0.0, 0.0, 0.49);
        let rep = change_representation(&s, &s, &x, &front_ray(), &window()).unwrap();
        assert_eq!(rep.color_norm(), 0.0);
        assert_eq!(rep.density_norm(), 0.0);
        assert_eq!(rep.color_diffs.len(), 16);
    }

    #[test]
    fn recolor_changes_color_only() {
        let a = box_scene(Vec3::x());
        let b = apply_edit(&a, &SceneEdit::Recolor { id: 1, texture: Texture::solid(0.0, 0.0, 1.0) }).unwrap();
        let x = Vec3::new(0.0, 0.0, 0.49);
        let rep = change_representation(&a, &b, &x, &front_ray(), &window()).unwrap();
        // brute force: the front face is opaque within the window, so the
        // weights sum to ~1 in both fields and |red - blue| sums to 2
        let w = window();
        let t0 = 3.0 - 0.49 - w.half_width;
        let step = 2.0 * w.half_width / 16.0;
        let mut expected = 0.0;
        let mut depth = 0.0;
        for i in 0..16 {
            let t = t0 + (i as f64 + 0.5) * step;
            let sigma = if 3.0 - t <= 0.5 { 1000.0 } else { 0.0 };
            let wi = (-depth as f64).exp() * (1.0 - (-sigma * step).exp());
            depth += sigma * step;
            expected += 2.0 * wi;
        }
        assert!((rep.color_norm() - expected).abs() < 1e-12);
        assert!(rep.color_norm() > 1.9);
        assert_eq!(rep.density_norm(), 0.0);
    }

    #[test]
    fn vacated_space_changes_density() {
        let a = box_scene(Vec3::x());
        let b = apply_edit(&a, &SceneEdit::Move { id: 1, translation: Vec3::new(1.2, 0.0, 0.0) }).unwrap();
        let x = Vec3::new(-0.2, 0.0, 0.49);
        let ray = Ray::new(Vec3::new(-0.2, 0.0, 3.0), Vec3::new(0.0, 0.0, -1.0), 1.0, 5.0).unwrap();
        let rep = change_representation(&a, &b, &x, &ray, &window()).unwrap();
        assert!(rep.density_diffs.iter().any(|&d| d > 0.0));
        assert!(rep.density_norm() > 900.0);
    }

    #[test]
    fn off_ray_and_out_of_range_rejected() {
        let s = box_scene(Vec3::x());
        let r = front_ray();
        assert!(change_representation(&s, &s, &Vec3::new(0.1, 0.0, 0.0), &r, &window()).is_err());
        // window would start before near
        assert!(change_representation(&s, &s, &Vec3::new(0.0, 0.0, 1.99), &r, &window()).is_err());
    }

    fn rep(c: f64, s: f64) -> ChangeRepresentation {
        ChangeRepresentation { color_diffs: vec![c / 2.0, c / 2.0], density_diffs: vec![s], view: Vec3::z() }
    }

    #[test]
    fn threshold_arithmetic() {
        let th = Thresholds::new(120.0, 300.0).unwrap();
        assert_eq!(per_view_indicators(&rep(0.0, 0.0), &th), ChangeIndicators::default());
        assert!(per_view_indicators(&rep(200.0 / 255.0, 0.0), &th).color);
        // equality is not a change
        let edge = ChangeRepresentation { color_diffs: vec![120.0 / 255.0], density_diffs: vec![300.0], view: Vec3::z() };
        assert_eq!(per_view_indicators(&edge, &th), ChangeIndicators::default());
        assert!(Thresholds::new(0.0, 1.0).is_err());
    }

    #[test]
    fn surround_offsets() {
        let x = Vec3::new(0.3, 0.1, -0.2);
        let reference = Ray::new(x + Vec3::new(0.0, 0.0, 3.0), Vec3::new(0.0, 0.0, -1.0), 0.5, 6.0).unwrap();
        let views = sample_view_set(ViewMode::surround(), &x, &reference, 5).unwrap();
        let angles: Vec<f64> = views
            .rays
            .iter()
            .map(|r| (-r.direction.x).atan2(-r.direction.z).to_degrees())
            .collect();
        for (a, e) in angles.iter().zip([-90.0, -45.0, 0.0, 45.0, 90.0]) {
            assert!((a - e).abs() < 1e-9, "{angles:?}");
        }
        for r in &views.rays {
            let t = (x - r.origin).dot(&r.direction);
            assert!((r.at(t) - x).norm() < 1e-9);
            assert!((t - 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn forward_facing_cone() {
        let x = Vec3::new(0.1, -0.2, 0.0);
        let dir = Vec3::new(0.1, 0.05, -1.0).normalize();
        let reference = Ray::new(x - dir * 3.0, dir, 1.0, 6.0).unwrap();
        let half = 0.2;
        let views = sample_view_set(ViewMode::ForwardFacing { cone_half_angle: half }, &x, &reference, 5).unwrap();
        assert_eq!(views.rays.len(), 5);
        assert_eq!(views.rays[0].direction, dir);
        for r in &views.rays {
            let angle = r.direction.dot(&dir).clamp(-1.0, 1.0).acos();
            assert!(angle <= half + 1e-12);
            let t = (x - r.origin).dot(&r.direction);
            assert!((r.at(t) - x).norm() < 1e-9);
        }
        let err = sample_view_set(ViewMode::ForwardFacing { cone_half_angle: 0.0 }, &x, &reference, 3);
        assert!(matches!(err, Err(Error::Degenerate(_))));
        let up = Ray::new(x - Vec3::y() * 2.0, Vec3::y(), 0.1, 5.0).unwrap();
        assert!(sample_view_set(ViewMode::surround(), &x, &up, 5).is_err());
        assert!(sample_view_set(ViewMode::surround(), &x, &up, 1).is_ok());
    }

    #[test]
    fn single_view_matches_per_view() {
        let a = box_scene(Vec3::x());
        let b = box_scene(Vec3::new(0.0, 0.5, 0.0));
        let x = Vec3::new(0.0, 0.0, 0.49);
        let th = Thresholds::default();
        let views = sample_view_set(ViewMode::surround(), &x, &front_ray(), 1).unwrap();
        let direct = per_view_indicators(&change_representation(&a, &b, &x, &front_ray(), &window()).unwrap(), &th);
        assert_eq!(detect_change_point(&a, &b, &x, &views, &th, &window()).unwrap(), direct);
        assert!(direct.color);
    }

    #[test]
    fn one_dissenting_view_vetoes() {
        // field b differs from a only for queries travelling along +x
        struct Directional(SceneSpec);
        impl RadianceField for Directional {
            fn query(&self, x: &Vec3, d: &Vec3) -> RadianceSample {
                let s = self.0.eval(x);
                if d.x > 0.5 { RadianceSample::new(Vec3::new(0.0, 0.0, 1.0), s.density) } else { s }
            }
        }
        let a = box_scene(Vec3::x());
        let b = Directional(a.clone());
        let x = Vec3::new(0.0, 0.0, 0.49);
        let th = Thresholds::default();
        let w = window();
        let views = sample_view_set(ViewMode::surround(), &x, &front_ray(), 5).unwrap();
        let per: Vec<_> = views
            .rays
            .iter()
            .map(|r| per_view_indicators(&change_representation(&a, &b, &x, r, &w).unwrap(), &th))
            .collect();
        assert!(per.iter().any(|p| p.color));
        assert!(per.iter().any(|p| !p.color));
        assert!(!detect_change_point(&a, &b, &x, &views, &th, &w).unwrap().changed());
    }

    proptest! {
        #[test]
        fn raising_thresholds_never_adds_changes(
            c in prop::collection::vec(0.0f64..1.0, 1..8),
            s in prop::collection::vec(0.0f64..400.0, 1..8),
            ec in 1.0f64..200.0, es in 1.0f64..600.0, bump_c in 0.0f64..100.0, bump_s in 0.0f64..300.0,
        ) {
            let r = ChangeRepresentation { color_diffs: c, density_diffs: s, view: Vec3::z() };
            let lo = per_view_indicators(&r, &Thresholds::new(ec, es).unwrap());
            let hi = per_view_indicators(&r, &Thresholds::new(ec + bump_c, es + bump_s).unwrap());
            prop_assert!(lo.color || !hi.color);
            prop_assert!(lo.density || !hi.density);
        }

        #[test]
        fn identical_fields_never_change(px in -0.45f64..0.45, py in -0.45f64..0.45, v in 1usize..7) {
            let s = box_scene(Vec3::new(0.3, 0.6, 0.9));
            let x = Vec3::new(px, py, 0.49);
            let reference = Ray::new(Vec3::new(px, py, 3.0), Vec3::new(0.0, 0.0, -1.0), 1.0, 5.0).unwrap();
            let views = sample_view_set(ViewMode::ForwardFacing { cone_half_angle: 0.2 }, &x, &reference, v).unwrap();
            let th = Thresholds::new(1e-3, 1e-3).unwrap();
            prop_assert!(!detect_change_point(&s, &s, &x, &views, &th, &window()).unwrap().changed());
        }
    }
}
