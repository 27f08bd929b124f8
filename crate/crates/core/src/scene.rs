//! Analytic scenes that act as exact radiance fields, scene edits, capture
//! trajectories and ground-truth change masks.

use nalgebra::Rotation3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, Intrinsics, Vec3};
use crate::change_render::{select_center_point, ChangeMap};
use crate::error::{Error, Result};
use crate::render::{map_pixels, RadianceField, RadianceSample, Schedule};

/// Tolerance used when deciding whether two oracle samples differ.
pub const ORACLE_DIFF_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        if !(0..3).all(|i| min[i] < max[i]) {
            return Err(Error::invalid("box min must be below max on every axis"));
        }
        Ok(Self { min, max })
    }

    pub fn cube(half: f64) -> Self {
        Self {
            min: Vec3::repeat(-half),
            max: Vec3::repeat(half),
        }
    }

    pub fn contains(&self, x: &Vec3) -> bool {
        (0..3).all(|i| x[i] >= self.min[i] && x[i] <= self.max[i])
    }

    pub fn contains_box(&self, other: &Aabb) -> bool {
        self.contains(&other.min) && self.contains(&other.max)
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    /// Parametric interval `[t0, t1]` where `origin + t * dir` is inside the box.
    pub fn ray_interval(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            if dir[i].abs() < 1e-300 {
                if origin[i] < self.min[i] || origin[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[i];
            let (a, b) = ((self.min[i] - origin[i]) * inv, (self.max[i] - origin[i]) * inv);
            let (a, b) = if a < b { (a, b) } else { (b, a) };
            t0 = t0.max(a);
            t1 = t1.min(b);
        }
        (t0 <= t1).then_some((t0, t1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Box { center: Vec3, half_extents: Vec3 },
    Sphere { center: Vec3, radius: f64 },
}

impl Shape {
    pub fn contains(&self, x: &Vec3) -> bool {
        match self {
            Shape::Box {
                center,
                half_extents,
            } => (0..3).all(|i| (x[i] - center[i]).abs() <= half_extents[i]),
            Shape::Sphere { center, radius } => (x - center).norm_squared() <= radius * radius,
        }
    }

    pub fn bounding_box(&self) -> Aabb {
        match *self {
            Shape::Box {
                center,
                half_extents,
            } => Aabb {
                min: center - half_extents,
                max: center + half_extents,
            },
            Shape::Sphere { center, radius } => Aabb {
                min: center - Vec3::repeat(radius),
                max: center + Vec3::repeat(radius),
            },
        }
    }

    pub fn center(&self) -> Vec3 {
        match *self {
            Shape::Box { center, .. } | Shape::Sphere { center, .. } => center,
        }
    }

    fn translated(&self, offset: &Vec3) -> Shape {
        match *self {
            Shape::Box {
                center,
                half_extents,
            } => Shape::Box {
                center: center + offset,
                half_extents,
            },
            Shape::Sphere { center, radius } => Shape::Sphere {
                center: center + offset,
                radius,
            },
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            Shape::Box { half_extents, .. } => half_extents.iter().all(|&h| h > 0.0),
            Shape::Sphere { radius, .. } => *radius > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("primitive extents must be positive"))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Texture {
    Solid { color: Vec3 },
    /// Two-color 3D checkerboard. `cell` defaults to 1/8 of the largest
    /// primitive extent.
    Checker {
        a: Vec3,
        b: Vec3,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cell: Option<f64>,
    },
}

impl Texture {
    pub fn solid(r: f64, g: f64, b: f64) -> Self {
        Texture::Solid {
            color: Vec3::new(r, g, b),
        }
    }

    fn colors_valid(&self) -> bool {
        let ok = |c: &Vec3| c.iter().all(|v| (0.0..=1.0).contains(v));
        match self {
            Texture::Solid { color } => ok(color),
            Texture::Checker { a, b, cell } => ok(a) && ok(b) && cell.is_none_or(|c| c > 0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub id: u32,
    pub shape: Shape,
    pub texture: Texture,
    pub density: f64,
}

impl Primitive {
    pub fn color_at(&self, x: &Vec3) -> Vec3 {
        match self.texture {
            Texture::Solid { color } => color,
            Texture::Checker { a, b, cell } => {
                let bb = self.shape.bounding_box();
                let cell = cell.unwrap_or_else(|| bb.extent().max() / 8.0);
                let local = (x - bb.min) / cell;
                let parity = local.iter().map(|v| v.floor() as i64).sum::<i64>().rem_euclid(2);
                if parity == 0 {
                    a
                } else {
                    b
                }
            }
        }
    }

    fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        if !(self.density >= 0.0 && self.density.is_finite()) {
            return Err(Error::invalid(format!("primitive {} has invalid density", self.id)));
        }
        if !self.texture.colors_valid() {
            return Err(Error::invalid(format!("primitive {} has colors outside [0, 1]", self.id)));
        }
        Ok(())
    }
}

/// An ordered list of primitives. Where primitives overlap, the one listed
/// last wins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    #[serde(default)]
    pub background_density: f64,
    pub bounds: Aabb,
}

impl SceneSpec {
    pub fn new(primitives: Vec<Primitive>, background_density: f64, bounds: Aabb) -> Result<Self> {
        let scene = Self {
            primitives,
            background_density,
            bounds,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.background_density >= 0.0) {
            return Err(Error::invalid("background density must be nonnegative"));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            p.validate()?;
            if self.primitives[..i].iter().any(|q| q.id == p.id) {
                return Err(Error::invalid(format!("duplicate primitive id {}", p.id)));
            }
            if !self.bounds.contains_box(&p.shape.bounding_box()) {
                return Err(Error::invalid(format!("primitive {} leaves the scene bounds", p.id)));
            }
        }
        Ok(())
    }

    pub fn primitive(&self, id: u32) -> Result<&Primitive> {
        self.primitives
            .iter()
            .find(|p| p.id == id)
            .ok_or(Error::MissingPrimitive(id))
    }

    /// Color and density at `x`. View direction is ignored.
    pub fn eval(&self, x: &Vec3) -> RadianceSample {
        match self.primitives.iter().rev().find(|p| p.shape.contains(x)) {
            Some(p) => RadianceSample::new(p.color_at(x), p.density),
            None => RadianceSample::new(Vec3::zeros(), self.background_density),
        }
    }
}

impl RadianceField for SceneSpec {
    fn query(&self, x: &Vec3, _d: &Vec3) -> RadianceSample {
        self.eval(x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum SceneEdit {
    Move { id: u32, translation: Vec3 },
    Recolor { id: u32, texture: Texture },
    Add { primitive: Primitive },
    Remove { id: u32 },
}

/// Returns the post-change scene; `scene` itself is untouched.
pub fn apply_edit(scene: &SceneSpec, edit: &SceneEdit) -> Result<SceneSpec> {
    let mut out = scene.clone();
    let index = |id: u32| {
        scene
            .primitives
            .iter()
            .position(|p| p.id == id)
            .ok_or(Error::MissingPrimitive(id))
    };
    match edit {
        SceneEdit::Move { id, translation } => {
            let i = index(*id)?;
            out.primitives[i].shape = scene.primitives[i].shape.translated(translation);
        }
        SceneEdit::Recolor { id, texture } => {
            let i = index(*id)?;
            out.primitives[i].texture = *texture;
        }
        SceneEdit::Add { primitive } => out.primitives.push(*primitive),
        SceneEdit::Remove { id } => {
            let i = index(*id)?;
            out.primitives.remove(i);
        }
    }
    out.validate()?;
    Ok(out)
}

pub fn apply_edits(scene: &SceneSpec, edits: &[SceneEdit]) -> Result<SceneSpec> {
    edits
        .iter()
        .try_fold(scene.clone(), |s, e| apply_edit(&s, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Circle {
    pub height: f64,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TrajectoryMode {
    /// Serpentine path over a `width x height` rectangle in the plane at
    /// `distance` in front of the scene center (along `+z`).
    ForwardFacing {
        count: usize,
        rows: usize,
        distance: f64,
        width: f64,
        height: f64,
    },
    /// `per_circle` cameras on each horizontal circle.
    Surround { per_circle: usize, circles: Vec<Circle> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    #[serde(flatten)]
    pub mode: TrajectoryMode,
    pub center: Vec3,
    pub intrinsics: Intrinsics,
    pub near: f64,
    pub far: f64,
    /// Uniform position jitter amplitude per axis.
    #[serde(default)]
    pub jitter: f64,
    #[serde(default)]
    pub seed: u64,
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        match &self.mode {
            TrajectoryMode::ForwardFacing {
                count,
                rows,
                distance,
                width,
                height,
            } => {
                if *count < 2 || *rows < 1 || rows > count {
                    return Err(Error::invalid("forward-facing trajectory needs count >= 2 and 1 <= rows <= count"));
                }
                if !(*distance > 0.0 && *width >= 0.0 && *height >= 0.0) || (*width == 0.0 && *height == 0.0) {
                    return Err(Error::Degenerate("forward-facing capture plane is degenerate".into()));
                }
            }
            TrajectoryMode::Surround { per_circle, circles } => {
                if *per_circle < 2 || circles.is_empty() {
                    return Err(Error::invalid("surround trajectory needs per_circle >= 2 and a circle"));
                }
                if circles.iter().any(|c| !(c.radius > 0.0)) {
                    return Err(Error::Degenerate("circle radius must be positive".into()));
                }
            }
        }
        if !(self.jitter >= 0.0) {
            return Err(Error::invalid("jitter must be nonnegative"));
        }
        Ok(())
    }

    pub fn camera_count(&self) -> usize {
        match &self.mode {
            TrajectoryMode::ForwardFacing { count, .. } => *count,
            TrajectoryMode::Surround {
                per_circle,
                circles,
            } => per_circle * circles.len(),
        }
    }

    /// Half-angle of the cone of directions under which the capture rectangle
    /// is seen from the scene center (forward-facing only).
    pub fn cone_half_angle(&self) -> Option<f64> {
        match self.mode {
            TrajectoryMode::ForwardFacing {
                distance,
                width,
                height,
                ..
            } => Some((0.5 * width).hypot(0.5 * height).atan2(distance)),
            TrajectoryMode::Surround { .. } => None,
        }
    }

    fn base_positions(&self) -> Vec<Vec3> {
        match &self.mode {
            TrajectoryMode::ForwardFacing {
                count,
                rows,
                distance,
                width,
                height,
            } => {
                let per_row = count.div_ceil(*rows);
                (0..*count)
                    .map(|i| {
                        let (row, mut col) = (i / per_row, i % per_row);
                        let in_row = per_row.min(count - row * per_row);
                        if row % 2 == 1 {
                            col = in_row - 1 - col;
                        }
                        let fx = if in_row > 1 { col as f64 / (in_row - 1) as f64 } else { 0.5 };
                        let fy = if *rows > 1 { row as f64 / (rows - 1) as f64 } else { 0.5 };
                        self.center
                            + Vec3::new(
                                (fx - 0.5) * width,
                                (0.5 - fy) * height,
                                *distance,
                            )
                    })
                    .collect()
            }
            TrajectoryMode::Surround {
                per_circle,
                circles,
            } => circles
                .iter()
                .flat_map(|c| {
                    (0..*per_circle).map(move |i| {
                        let phi = std::f64::consts::TAU * i as f64 / *per_circle as f64;
                        self.center + Vec3::new(c.radius * phi.sin(), c.height, c.radius * phi.cos())
                    })
                })
                .collect(),
        }
    }
}

/// Cameras along the trajectory, each looking at the scene center.
pub fn make_trajectory(spec: &TrajectorySpec) -> Result<Vec<Camera>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    spec.base_positions()
        .into_iter()
        .map(|p| {
            let jitter = Vec3::from_fn(|_, _| spec.jitter * (2.0 * rng.random::<f64>() - 1.0));
            Camera::look_at(spec.intrinsics, p + jitter, spec.center, Vec3::y(), spec.near, spec.far)
        })
        .collect()
}

/// Per-pixel change labels between two oracle scenes.
///
/// The labelled point is chosen exactly as the detector chooses it (the
/// nearer of the two per-scene weight maxima); the pixel is changed when the
/// scenes disagree there.
pub fn ground_truth_change_mask(a: &SceneSpec, b: &SceneSpec, camera: &Camera, k: usize) -> Result<ChangeMap> {
    let values = map_pixels(camera.width(), camera.height(), Schedule::Parallel, |x, y| {
        let ray = camera.pixel_ray(x, y)?;
        Ok(match select_center_point(a, b, &ray, k)? {
            Some(center) => oracle_differs(&a.eval(&center.position), &b.eval(&center.position)),
            None => false,
        })
    })?;
    Ok(ChangeMap::new(
        camera.width(),
        camera.height(),
        values,
        crate::change_render::provenance_hash(&("ground_truth", camera, k)),
    ))
}

pub fn oracle_differs(a: &RadianceSample, b: &RadianceSample) -> bool {
    (a.color - b.color).abs().max() > ORACLE_DIFF_TOL || (a.density - b.density).abs() > ORACLE_DIFF_TOL
}

/// Wraps a field and re-expresses it through a similarity transform:
/// `query(x, d) = inner(s R x + t, R d)` with density scaled by `s` so that
/// optical depth is preserved.
#[derive(Debug, Clone)]
pub struct TransformedField<F> {
    pub inner: F,
    pub transform: crate::align::SimilarityTransform,
}

impl<F: RadianceField> RadianceField for TransformedField<F> {
    fn query(&self, x: &Vec3, d: &Vec3) -> RadianceSample {
        let t = &self.transform;
        let s = self.inner.query(&t.apply(x), &(t.rotation * d));
        RadianceSample::new(s.color, s.density * t.scale)
    }
}

/// Adds deterministic color noise to queries issued from one viewpoint,
/// i.e. queries whose line passes within `radius` of `eye` with the eye
/// behind the query point. Models a view-specific rendering artifact.
#[derive(Debug, Clone)]
pub struct ViewNoiseField<F> {
    pub inner: F,
    pub eye: Vec3,
    pub radius: f64,
    pub amplitude: f64,
    pub seed: u64,
}

impl<F: RadianceField> RadianceField for ViewNoiseField<F> {
    fn query(&self, x: &Vec3, d: &Vec3) -> RadianceSample {
        let s = self.inner.query(x, d);
        let to_eye = self.eye - x;
        let along = to_eye.dot(d);
        if along >= 0.0 || (to_eye - d * along).norm() > self.radius {
            return s;
        }
        let noise = Vec3::from_fn(|i, _| {
            let h = hash_point(x, self.seed.wrapping_add(i as u64));
            self.amplitude * (2.0 * h - 1.0)
        });
        RadianceSample::new((s.color + noise).map(|c| c.clamp(0.0, 1.0)), s.density)
    }
}

/// Global multiplicative brightness change, clamped to `[0, 1]`.
#[derive(Debug, Clone)]
pub struct BrightnessField<F> {
    pub inner: F,
    pub gain: f64,
}

impl<F: RadianceField> RadianceField for BrightnessField<F> {
    fn query(&self, x: &Vec3, d: &Vec3) -> RadianceSample {
        let s = self.inner.query(x, d);
        RadianceSample::new((s.color * self.gain).map(|c| c.clamp(0.0, 1.0)), s.density)
    }
}

/// Uniform value in `[0, 1)` from a point, stable across runs.
fn hash_point(x: &Vec3, seed: u64) -> f64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in x.iter() {
        let q = (v * 1e4).round() as i64 as u64;
        h = splitmix(h ^ q);
    }
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Rotation by `angle` radians about the world vertical axis.
pub(crate) fn rotation_about_up(angle: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vec3::y_axis(), angle)
}

/// Forward-facing tabletop: a textured back wall and floor, a static sphere,
/// and a box (id 3) that the bundled edit moves sideways.
pub fn tabletop_scene() -> SceneSpec {
    let wall = Primitive {
        id: 0,
        shape: Shape::Box {
            center: Vec3::new(0.0, 0.0, -1.3),
            half_extents: Vec3::new(1.95, 1.45, 0.1),
        },
        texture: Texture::Checker {
            a: Vec3::new(0.85, 0.85, 0.8),
            b: Vec3::new(0.45, 0.5, 0.6),
            cell: Some(0.3),
        },
        density: 1000.0,
    };
    let floor = Primitive {
        id: 1,
        shape: Shape::Box {
            center: Vec3::new(0.0, -0.95, -0.2),
            half_extents: Vec3::new(1.95, 0.1, 1.0),
        },
        texture: Texture::Checker {
            a: Vec3::new(0.7, 0.6, 0.45),
            b: Vec3::new(0.35, 0.3, 0.25),
            cell: Some(0.3),
        },
        density: 1000.0,
    };
    let sphere = Primitive {
        id: 2,
        shape: Shape::Sphere {
            center: Vec3::new(0.75, -0.45, -0.3),
            radius: 0.4,
        },
        texture: Texture::Checker {
            a: Vec3::new(0.1, 0.7, 0.2),
            b: Vec3::new(0.05, 0.4, 0.1),
            cell: Some(0.2),
        },
        density: 1000.0,
    };
    let block = Primitive {
        id: 3,
        shape: Shape::Box {
            center: Vec3::new(-0.85, -0.5, 0.0),
            half_extents: Vec3::new(0.35, 0.35, 0.35),
        },
        texture: Texture::Checker {
            a: Vec3::new(0.95, 0.15, 0.1),
            b: Vec3::new(0.95, 0.6, 0.1),
            cell: Some(0.175),
        },
        density: 1000.0,
    };
    SceneSpec::new(
        vec![wall, floor, sphere, block],
        0.0,
        Aabb {
            min: Vec3::new(-2.0, -1.5, -1.5),
            max: Vec3::new(2.0, 1.5, 1.5),
        },
    )
    .expect("tabletop scene is valid")
}

/// Moves the tabletop box sideways, fully clear of its old footprint.
pub fn tabletop_edit() -> SceneEdit {
    SceneEdit::Move {
        id: 3,
        translation: Vec3::new(0.95, 0.0, 0.55),
    }
}
