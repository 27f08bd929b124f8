//! Binary change maps rendered from an arbitrary camera, plus the naive
//! image-difference baseline.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::camera::{Camera, Ray, Vec3};
use crate::detect::{
    detect_change_point, sample_view_set, ChangeIndicators, Thresholds, ViewMode, WindowConfig,
};
use crate::error::{Error, Result};
use crate::render::{
    composite_weights, map_pixels, query_samples, render_image_with, sample_ray, RadianceField,
    Sampling, Schedule,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChangeMap {
    pub width: u32,
    pub height: u32,
    pub values: Vec<bool>,
    /// Hash of everything that determined the map (pose, thresholds, ...).
    pub provenance: String,
}

impl ChangeMap {
    pub fn new(width: u32, height: u32, values: Vec<bool>, provenance: String) -> Self {
        assert_eq!(values.len(), width as usize * height as usize);
        Self {
            width,
            height,
            values,
            provenance,
        }
    }

    pub fn empty(width: u32, height: u32) -> Self {
        Self::new(width, height, vec![false; width as usize * height as usize], String::new())
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.values[y as usize * self.width as usize + x as usize]
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    /// Pixels set here but not in `reference`.
    pub fn false_positives(&self, reference: &ChangeMap) -> usize {
        self.values
            .iter()
            .zip(&reference.values)
            .filter(|(&p, &g)| p && !g)
            .count()
    }
}

/// Short stable hash of any serializable description.
pub fn provenance_hash<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("provenance is serializable");
    let digest = Sha256::digest(&bytes);
    hex::encode(&digest[..8])
}

/// Everything needed to turn two fields and a camera into a change map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectConfig {
    pub thresholds: Thresholds,
    /// Number of view directions per point.
    pub views: usize,
    pub view_mode: ViewMode,
    pub window: WindowConfig,
    /// Samples along each camera ray.
    pub samples: usize,
}

impl DetectConfig {
    pub fn validate(&self) -> Result<()> {
        self.thresholds.validate()?;
        if self.views == 0 || self.samples == 0 || self.window.samples == 0 {
            return Err(Error::invalid("views, samples and window samples must be positive"));
        }
        if !(self.window.half_width_factor > 0.0) {
            return Err(Error::invalid("window half-width factor must be positive"));
        }
        Ok(())
    }
}

/// Chosen center point along a camera ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CenterPoint {
    pub position: Vec3,
    pub t: f64,
}

/// Finds the largest-weight sample along the ray in each field and returns
/// the one nearer the camera. A field whose weights are all zero offers no
/// candidate; `None` means both fields are empty along the ray.
pub fn select_center_point<A, B>(field_a: &A, field_b: &B, ray: &Ray, k: usize) -> Result<Option<CenterPoint>>
where
    A: RadianceField + ?Sized,
    B: RadianceField + ?Sized,
{
    let samples = sample_ray(ray, k, Sampling::Midpoint)?;
    let argmax = |values: Vec<crate::render::RadianceSample>| -> Result<Option<usize>> {
        let densities: Vec<f64> = values.iter().map(|s| s.density).collect();
        Ok(composite_weights(&densities, &samples.deltas)?.argmax())
    };
    let ia = argmax(query_samples(field_a, &samples.positions, &ray.direction)?)?;
    let ib = argmax(query_samples(field_b, &samples.positions, &ray.direction)?)?;
    let nearest = match (ia, ib) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    };
    Ok(nearest.map(|i| CenterPoint {
        position: samples.positions[i],
        t: samples.t_values[i],
    }))
}

/// Change indicators for the point seen through one pixel; `None` for empty rays.
pub fn pixel_indicators<A, B>(
    field_a: &A,
    field_b: &B,
    camera: &Camera,
    px: u32,
    py: u32,
    config: &DetectConfig,
) -> Result<Option<ChangeIndicators>>
where
    A: RadianceField + ?Sized,
    B: RadianceField + ?Sized,
{
    let ray = camera.pixel_ray(px, py)?;
    let Some(center) = select_center_point(field_a, field_b, &ray, config.samples)? else {
        return Ok(None);
    };
    let views = sample_view_set(config.view_mode, &center.position, &ray, config.views)?;
    let window = config.window.resolve(&ray, config.samples)?;
    detect_change_point(field_a, field_b, &center.position, &views, &config.thresholds, &window).map(Some)
}

pub fn render_change_map<A, B>(field_a: &A, field_b: &B, camera: &Camera, config: &DetectConfig) -> Result<ChangeMap>
where
    A: RadianceField + ?Sized,
    B: RadianceField + ?Sized,
{
    render_change_map_with(field_a, field_b, camera, config, Schedule::Parallel)
}

pub fn render_change_map_with<A, B>(
    field_a: &A,
    field_b: &B,
    camera: &Camera,
    config: &DetectConfig,
    schedule: Schedule,
) -> Result<ChangeMap>
where
    A: RadianceField + ?Sized,
    B: RadianceField + ?Sized,
{
    config.validate()?;
    let values = map_pixels(camera.width(), camera.height(), schedule, |x, y| {
        Ok(pixel_indicators(field_a, field_b, camera, x, y, config)?.is_some_and(|i| i.changed()))
    })?;
    Ok(ChangeMap::new(
        camera.width(),
        camera.height(),
        values,
        provenance_hash(&("change_map", camera, config)),
    ))
}

/// Thresholds the channel-summed absolute difference of the two rendered
/// images at `eps_c_img` (0–255 scale).
pub fn naive_change_map<A, B>(field_a: &A, field_b: &B, camera: &Camera, eps_c_img: f64, k: usize) -> Result<ChangeMap>
where
    A: RadianceField + ?Sized,
    B: RadianceField + ?Sized,
{
    let a = render_image_with(field_a, camera, k, Schedule::Parallel)?;
    let b = render_image_with(field_b, camera, k, Schedule::Parallel)?;
    let threshold = eps_c_img / 255.0;
    let values = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(pa, pb)| (pa - pb).abs().sum() > threshold)
        .collect();
    Ok(ChangeMap::new(
        camera.width(),
        camera.height(),
        values,
        provenance_hash(&("naive", camera, eps_c_img, k)),
    ))
}

/// Single-point, single-view difference of the raw field values.
pub fn naive_point_indicators<A, B>(field_a: &A, field_b: &B, x: &Vec3, d: &Vec3, th: &Thresholds) -> ChangeIndicators
where
    A: RadianceField + ?Sized,
    B: RadianceField + ?Sized,
{
    let a = field_a.query(x, d);
    let b = field_b.query(x, d);
    ChangeIndicators {
        color: (a.color - b.color).abs().sum() > th.color_unit(),
        density: (a.density - b.density).abs() > th.eps_sigma,
    }
}
