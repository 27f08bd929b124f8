//! Stratified ray sampling and emission-absorption compositing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::camera::{Camera, Ray, Vec3};
use crate::error::{Error, Result};

/// Color and volume density returned by a field query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadianceSample {
    pub color: Vec3,
    pub density: f64,
}

impl RadianceSample {
    pub const EMPTY: RadianceSample = RadianceSample {
        color: Vec3::new(0.0, 0.0, 0.0),
        density: 0.0,
    };

    pub fn new(color: Vec3, density: f64) -> Self {
        Self { color, density }
    }

    pub fn is_valid(&self) -> bool {
        self.density.is_finite()
            && self.density >= 0.0
            && self.color.iter().all(|c| (0.0..=1.0).contains(c))
    }
}

/// Anything that maps a point and view direction to `(color, density)`.
///
/// Implementations must be safe to query concurrently.
pub trait RadianceField: Send + Sync {
    fn query(&self, x: &Vec3, d: &Vec3) -> RadianceSample;
}

impl<F: RadianceField + ?Sized> RadianceField for &F {
    fn query(&self, x: &Vec3, d: &Vec3) -> RadianceSample {
        (**self).query(x, d)
    }
}

impl<F: RadianceField + ?Sized> RadianceField for Box<F> {
    fn query(&self, x: &Vec3, d: &Vec3) -> RadianceSample {
        (**self).query(x, d)
    }
}

impl<F: RadianceField + ?Sized> RadianceField for std::sync::Arc<F> {
    fn query(&self, x: &Vec3, d: &Vec3) -> RadianceSample {
        (**self).query(x, d)
    }
}

/// Field with no matter anywhere.
#[derive(Debug, Clone, Copy, Default)]
pub struct Vacuum;

impl RadianceField for Vacuum {
    fn query(&self, _x: &Vec3, _d: &Vec3) -> RadianceSample {
        RadianceSample::EMPTY
    }
}

/// Homogeneous medium filling all of space.
#[derive(Debug, Clone, Copy)]
pub struct ConstantField(pub RadianceSample);

impl RadianceField for ConstantField {
    fn query(&self, _x: &Vec3, _d: &Vec3) -> RadianceSample {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    /// Bin centers.
    Midpoint,
    /// One uniformly jittered sample per bin.
    Stratified { seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RaySamples {
    pub positions: Vec<Vec3>,
    pub t_values: Vec<f64>,
    pub deltas: Vec<f64>,
}

impl RaySamples {
    pub fn len(&self) -> usize {
        self.t_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_values.is_empty()
    }
}

/// Places `k` samples in `[near, far]`, one per equal-width bin.
///
/// Spacings are `t[i+1] - t[i]`; the last spacing repeats the previous one
/// (the bin width when `k == 1`).
pub fn sample_ray(ray: &Ray, k: usize, sampling: Sampling) -> Result<RaySamples> {
    let t_values = sample_interval(ray.near, ray.far, k, sampling)?;
    let positions = t_values.iter().map(|&t| ray.at(t)).collect();
    let deltas = deltas_for(&t_values, (ray.far - ray.near) / k as f64);
    Ok(RaySamples {
        positions,
        t_values,
        deltas,
    })
}

pub(crate) fn sample_interval(near: f64, far: f64, k: usize, sampling: Sampling) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    let bin = (far - near) / k as f64;
    Ok(match sampling {
        Sampling::Midpoint => (0..k).map(|i| near + (i as f64 + 0.5) * bin).collect(),
        Sampling::Stratified { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..k)
                .map(|i| near + (i as f64 + rng.random::<f64>()) * bin)
                .collect()
        }
    })
}

pub(crate) fn deltas_for(t_values: &[f64], single_bin: f64) -> Vec<f64> {
    let k = t_values.len();
    if k == 1 {
        return vec![single_bin];
    }
    let mut deltas: Vec<f64> = t_values.windows(2).map(|w| w[1] - w[0]).collect();
    deltas.push(deltas[k - 2]);
    deltas
}

/// Per-sample transmittance, alpha and blending weight along one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeWeights {
    pub transmittance: Vec<f64>,
    pub alpha: Vec<f64>,
    pub weights: Vec<f64>,
}

impl CompositeWeights {
    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Index of the largest weight (first on ties), `None` if all are zero.
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &w) in self.weights.iter().enumerate() {
            if w > 0.0 && best.is_none_or(|(_, b)| w > b) {
                best = Some((i, w));
            }
        }
        best.map(|(i, _)| i)
    }
}

/// `T_i = exp(-sum_{j<i} sigma_j delta_j)`, `alpha_i = 1 - exp(-sigma_i delta_i)`,
/// `w_i = T_i alpha_i`.
pub fn composite_weights(densities: &[f64], deltas: &[f64]) -> Result<CompositeWeights> {
    composite_weights_from(densities, deltas, 0.0)
}

/// `a - b` rounded toward negative infinity.
fn sub_round_down(a: f64, b: f64) -> f64 {
    let r = a - b;
    // exact rounding error of the difference (two-sum)
    let v = r - a;
    let err = (a - (r - v)) + (-b - v);
    if err < 0.0 {
        r.next_down()
    } else {
        r
    }
}

/// Same as [`composite_weights`] but starting from an accumulated optical
/// depth `prefix_depth` in front of the first sample.
pub fn composite_weights_from(
    densities: &[f64],
    deltas: &[f64],
    prefix_depth: f64,
) -> Result<CompositeWeights> {
    if densities.len() != deltas.len() {
        return Err(Error::invalid("densities and deltas differ in length"));
    }
    let k = densities.len();
    let mut transmittance = Vec::with_capacity(k);
    let mut alpha = Vec::with_capacity(k);
    let mut weights = Vec::with_capacity(k);
    let mut depth = prefix_depth;
    for (&sigma, &delta) in densities.iter().zip(deltas) {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::invalid(format!("density {sigma} is not a finite nonnegative value")));
        }
        if !(delta > 0.0) {
            return Err(Error::invalid(format!("spacing {delta} must be positive")));
        }
        let t = (-depth).exp();
        let tau = sigma * delta;
        let a = -(-tau).exp_m1();
        depth += tau;
        // capping at T_i - T_{i+1} keeps the weights' exact sum within 1
        let w = (t * a).min(sub_round_down(t, (-depth).exp()));
        transmittance.push(t);
        alpha.push(a);
        weights.push(w);
    }
    Ok(CompositeWeights {
        transmittance,
        alpha,
        weights,
    })
}

/// Queries `field` at every sample, validating each result.
pub fn query_samples<F: RadianceField + ?Sized>(
    field: &F,
    positions: &[Vec3],
    direction: &Vec3,
) -> Result<Vec<RadianceSample>> {
    positions
        .iter()
        .map(|x| {
            let s = field.query(x, direction);
            if s.is_valid() {
                Ok(s)
            } else {
                Err(Error::InvalidFieldSample {
                    x: x.x,
                    y: x.y,
                    z: x.z,
                })
            }
        })
        .collect()
}

/// `sum_i w_i c_i`, clamped to `[0, 1]`.
pub fn composite_color(samples: &[RadianceSample], deltas: &[f64]) -> Result<Vec3> {
    let densities: Vec<f64> = samples.iter().map(|s| s.density).collect();
    let w = composite_weights(&densities, deltas)?;
    let c = samples
        .iter()
        .zip(&w.weights)
        .fold(Vec3::zeros(), |acc, (s, &w)| acc + s.color * w);
    Ok(c.map(|v| v.clamp(0.0, 1.0)))
}

pub fn render_pixel<F: RadianceField + ?Sized>(field: &F, ray: &Ray, k: usize) -> Result<Vec3> {
    render_pixel_sampled(field, ray, k, Sampling::Midpoint)
}

pub fn render_pixel_sampled<F: RadianceField + ?Sized>(
    field: &F,
    ray: &Ray,
    k: usize,
    sampling: Sampling,
) -> Result<Vec3> {
    let samples = sample_ray(ray, k, sampling)?;
    let values = query_samples(field, &samples.positions, &ray.direction)?;
    composite_color(&values, &samples.deltas)
}

/// Row-major RGB image with channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<Vec3>,
}

impl ColorImage {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            pixels: vec![Vec3::zeros(); width as usize * height as usize],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> Vec3 {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    /// Quantizes to 8-bit RGB, row-major.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(3 * self.pixels.len());
        for p in &self.pixels {
            out.extend(p.iter().map(|&c| (c.clamp(0.0, 1.0) * 255.0).round() as u8));
        }
        out
    }

    pub fn from_rgb8(width: u32, height: u32, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != 3 * width as usize * height as usize {
            return Err(Error::Data("rgb buffer size does not match dimensions".into()));
        }
        let pixels = bytes
            .chunks_exact(3)
            .map(|c| Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64) / 255.0)
            .collect();
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn mse(&self, other: &ColorImage) -> Result<f64> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::Data("image dimensions differ".into()));
        }
        let sum: f64 = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).norm_squared())
            .sum();
        Ok(sum / (3.0 * self.pixels.len() as f64))
    }

    pub fn psnr(&self, other: &ColorImage) -> Result<f64> {
        Ok(-10.0 * self.mse(other)?.log10())
    }
}

/// Pixel evaluation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Schedule {
    Serial,
    #[default]
    Parallel,
}

/// Evaluates `f` once per pixel in row-major order. Results never depend on
/// the schedule since pixels do not share state.
pub(crate) fn map_pixels<T, F>(width: u32, height: u32, schedule: Schedule, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u32, u32) -> Result<T> + Sync + Send,
{
    let n = width as usize * height as usize;
    let eval = |i: usize| {
        let (x, y) = ((i % width as usize) as u32, (i / width as usize) as u32);
        f(x, y).map_err(|e| e.at_pixel(x, y))
    };
    match schedule {
        Schedule::Serial => (0..n).map(eval).collect(),
        Schedule::Parallel => (0..n).into_par_iter().map(eval).collect(),
    }
}

pub fn render_image<F: RadianceField + ?Sized>(field: &F, camera: &Camera, k: usize) -> Result<ColorImage> {
    render_image_with(field, camera, k, Schedule::Parallel)
}

pub fn render_image_with<F: RadianceField + ?Sized>(
    field: &F,
    camera: &Camera,
    k: usize,
    schedule: Schedule,
) -> Result<ColorImage> {
    let pixels = map_pixels(camera.width(), camera.height(), schedule, |x, y| {
        render_pixel(field, &camera.pixel_ray(x, y)?, k)
    })?;
    Ok(ColorImage {
        width: camera.width(),
        height: camera.height(),
        pixels,
    })
}
