//! Bringing two captures into one frame with a similarity transform, and
//! injecting controlled misalignment.

use nalgebra::{Matrix3, Rotation3, Unit, SVD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{check_rotation, Camera, Pose, Vec3};
use crate::error::{Error, Result};

/// `x -> scale * rotation * x + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "TransformRecord", try_from = "TransformRecord")]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(scale: f64, rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::invalid("similarity scale must be positive"));
        }
        check_rotation(&rotation)?;
        Ok(Self {
            scale,
            rotation,
            translation,
        })
    }

    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.rotation * x * self.scale + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            scale: 1.0 / self.scale,
            rotation: rt,
            translation: -(rt * self.translation) / self.scale,
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            scale: self.scale * other.scale,
            rotation: self.rotation * other.rotation,
            translation: self.apply(&other.translation),
        }
    }

    pub fn rotation_angle(&self) -> f64 {
        ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }

    /// Largest of rotation angle, scale and translation deviations from `other`.
    pub fn deviation(&self, other: &Self) -> f64 {
        let rel = Self {
            scale: 1.0,
            rotation: self.rotation * other.rotation.transpose(),
            translation: Vec3::zeros(),
        };
        // acos loses precision near 1, so measure the angle via the
        // antisymmetric part instead.
        let r = rel.rotation;
        let skew = Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
        let angle = (0.5 * skew.norm()).atan2(0.5 * (r.trace() - 1.0));
        angle
            .abs()
            .max((self.scale - other.scale).abs())
            .max((self.translation - other.translation).norm())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformRecord {
    pub scale: f64,
    /// Row-major.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl From<SimilarityTransform> for TransformRecord {
    fn from(t: SimilarityTransform) -> Self {
        let mut rotation = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                rotation[3 * i + j] = t.rotation[(i, j)];
            }
        }
        Self {
            scale: t.scale,
            rotation,
            translation: [t.translation.x, t.translation.y, t.translation.z],
        }
    }
}

impl TryFrom<TransformRecord> for SimilarityTransform {
    type Error = Error;

    fn try_from(r: TransformRecord) -> Result<Self> {
        SimilarityTransform::new(
            r.scale,
            Matrix3::from_row_slice(&r.rotation),
            Vec3::from(r.translation),
        )
    }
}

/// Least-squares similarity mapping `points_a` onto `points_b`
/// (closed-form SVD solution on the cross-covariance).
pub fn estimate_similarity(points_a: &[Vec3], points_b: &[Vec3]) -> Result<SimilarityTransform> {
    if points_a.len() != points_b.len() {
        return Err(Error::invalid("point sets differ in size"));
    }
    let n = points_a.len();
    if n < 3 {
        return Err(Error::invalid("at least three correspondences are required"));
    }
    let inv_n = 1.0 / n as f64;
    let mean_a = points_a.iter().sum::<Vec3>() * inv_n;
    let mean_b = points_b.iter().sum::<Vec3>() * inv_n;

    let mut cov = Matrix3::zeros();
    let mut var_a = 0.0;
    for (a, b) in points_a.iter().zip(points_b) {
        let (da, db) = (a - mean_a, b - mean_b);
        cov += db * da.transpose();
        var_a += da.norm_squared();
    }
    cov *= inv_n;
    var_a *= inv_n;

    let svd = SVD::new(cov, true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::Degenerate("SVD did not converge".into())),
    };
    // Sort singular values descending so the reflection fix hits the smallest.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let sv = order.map(|i| svd.singular_values[i]);
    if var_a <= 0.0 || sv[1] <= 1e-12 * sv[0].max(f64::MIN_POSITIVE) {
        return Err(Error::Degenerate("correspondences are collinear or coincident".into()));
    }
    let u = Matrix3::from_columns(&order.map(|i| u.column(i).into_owned()));
    let v = Matrix3::from_columns(&order.map(|i| v_t.row(i).transpose()));

    let mut signs = Vec3::new(1.0, 1.0, 1.0);
    if (u * v.transpose()).determinant() < 0.0 {
        signs.z = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&signs) * v.transpose();
    let scale = (sv[0] * signs.x + sv[1] * signs.y + sv[2] * signs.z) / var_a;
    let translation = mean_b - rotation * mean_a * scale;
    SimilarityTransform::new(scale, rotation, translation)
}

/// Moves a camera rigidly with the transform; pixel intrinsics are unchanged
/// while the depth range scales with the world.
pub fn apply_to_camera(t: &SimilarityTransform, camera: &Camera) -> Result<Camera> {
    let pose = Pose::new(t.rotation * camera.pose.rotation, t.apply(&camera.center()))?;
    Camera::new(camera.intrinsics, pose, camera.near * t.scale, camera.far * t.scale)
}

/// Size of an injected misalignment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Misalignment {
    /// Rotation angle in radians (about a random axis).
    pub rotation: f64,
    /// Translation length (random direction).
    pub translation: f64,
    /// Absolute log-scale change (random sign).
    #[serde(default)]
    pub log_scale: f64,
}

impl Misalignment {
    pub fn rigid(rotation: f64, translation: f64) -> Self {
        Self {
            rotation,
            translation,
            log_scale: 0.0,
        }
    }
}

/// Applies a random similarity of the given magnitude to every camera.
/// Returns the perturbed cameras and the transform that was applied.
pub fn inject_misalignment(
    cameras: &[Camera],
    seed: u64,
    magnitude: Misalignment,
) -> Result<(Vec<Camera>, SimilarityTransform)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let axis = random_unit(&mut rng);
    let direction = random_unit(&mut rng);
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let rotation = Rotation3::from_axis_angle(&Unit::new_unchecked(axis), magnitude.rotation).into_inner();
    let transform = SimilarityTransform::new(
        (sign * magnitude.log_scale).exp(),
        rotation,
        direction * magnitude.translation,
    )?;
    let cams = cameras
        .iter()
        .map(|c| apply_to_camera(&transform, c))
        .collect::<Result<Vec<_>>>()?;
    Ok((cams, transform))
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::from_fn(|_, _| 2.0 * rng.random::<f64>() - 1.0);
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}
