//! Dense voxel-grid radiance field trained by gradient descent on a
//! photometric loss.
//!
//! Each voxel stores four raw parameters: density (mapped through softplus)
//! and three color channels (mapped through a sigmoid). Queries trilinearly
//! interpolate the *activated* values between voxel centers, so outputs stay
//! in range by convexity.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, Ray, Vec3};
use crate::error::{Error, Result};
use crate::render::{composite_weights, sample_ray, ColorImage, RadianceField, RadianceSample, Sampling};
use crate::scene::Aabb;

const MAGIC: &[u8; 4] = b"VXGF";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 3 * 4 + 6 * 8;

pub const INIT_DENSITY_RAW: f32 = -2.0;
pub const INIT_COLOR_RAW: f32 = 0.0;

/// Gradient accumulation is split into this many ray chunks regardless of
/// thread count, so summation order is fixed.
const GRAD_CHUNKS: usize = 16;

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGridField {
    resolution: [usize; 3],
    bounds: Aabb,
    /// `[density | red | green | blue]`, each `nx*ny*nz` long, x fastest.
    params: Vec<f32>,
    /// Cached activated `(density, r, g, b)` per voxel.
    activated: Vec<[f64; 4]>,
}

/// Eight interpolation corners and their weights.
#[derive(Debug, Clone, Copy)]
struct Stencil {
    index: [usize; 8],
    weight: [f64; 8],
}

impl VoxelGridField {
    /// Grid initialised near-transparent and mid-gray.
    pub fn new(resolution: [usize; 3], bounds: Aabb) -> Result<Self> {
        let n = Self::check_resolution(resolution)?;
        let mut params = vec![INIT_DENSITY_RAW; n];
        params.extend(std::iter::repeat_n(INIT_COLOR_RAW, 3 * n));
        Self::from_params(resolution, bounds, params)
    }

    pub fn from_params(resolution: [usize; 3], bounds: Aabb, params: Vec<f32>) -> Result<Self> {
        let n = Self::check_resolution(resolution)?;
        Aabb::new(bounds.min, bounds.max)?;
        if params.len() != 4 * n {
            return Err(Error::invalid(format!("expected {} parameters, got {}", 4 * n, params.len())));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("parameters must be finite"));
        }
        let mut field = Self {
            resolution,
            bounds,
            params,
            activated: vec![[0.0; 4]; n],
        };
        for v in 0..n {
            field.refresh(v);
        }
        Ok(field)
    }

    fn check_resolution(resolution: [usize; 3]) -> Result<usize> {
        if resolution.contains(&0) {
            return Err(Error::invalid("grid resolution must be positive"));
        }
        Ok(resolution.iter().product())
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.resolution
    }

    pub fn bounds(&self) -> Aabb {
        self.bounds
    }

    pub fn voxel_count(&self) -> usize {
        self.activated.len()
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn set_param(&mut self, index: usize, value: f32) {
        self.params[index] = value;
        self.refresh(index % self.voxel_count());
    }

    pub fn voxel_index(&self, i: usize, j: usize, k: usize) -> usize {
        let [nx, ny, _] = self.resolution;
        i + nx * (j + ny * k)
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let cell = self.cell_size();
        self.bounds.min + Vec3::new(
            (i as f64 + 0.5) * cell.x,
            (j as f64 + 0.5) * cell.y,
            (k as f64 + 0.5) * cell.z,
        )
    }

    /// Activated `(density, r, g, b)` of one voxel.
    pub fn voxel_value(&self, voxel: usize) -> [f64; 4] {
        self.activated[voxel]
    }

    fn cell_size(&self) -> Vec3 {
        let e = self.bounds.extent();
        Vec3::new(
            e.x / self.resolution[0] as f64,
            e.y / self.resolution[1] as f64,
            e.z / self.resolution[2] as f64,
        )
    }

    fn refresh(&mut self, v: usize) {
        let n = self.voxel_count();
        let p = |c: usize| self.params[c * n + v] as f64;
        self.activated[v] = [softplus(p(0)), sigmoid(p(1)), sigmoid(p(2)), sigmoid(p(3))];
    }

    fn stencil(&self, x: &Vec3) -> Option<Stencil> {
        if !self.bounds.contains(x) {
            return None;
        }
        let cell = self.cell_size();
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let u = (x[a] - self.bounds.min[a]) / cell[a] - 0.5;
            let base = u.floor();
            frac[a] = u - base;
            let last = self.resolution[a] as i64 - 1;
            lo[a] = (base as i64).clamp(0, last) as usize;
            hi[a] = (base as i64 + 1).clamp(0, last) as usize;
        }
        let mut index = [0usize; 8];
        let mut weight = [0.0f64; 8];
        for c in 0..8 {
            let pick = |a: usize| (c >> a) & 1 == 1;
            let (i, j, k) = (
                if pick(0) { hi[0] } else { lo[0] },
                if pick(1) { hi[1] } else { lo[1] },
                if pick(2) { hi[2] } else { lo[2] },
            );
            index[c] = self.voxel_index(i, j, k);
            weight[c] = (0..3)
                .map(|a| if pick(a) { frac[a] } else { 1.0 - frac[a] })
                .product();
        }
        Some(Stencil { index, weight })
    }

    fn interpolate(&self, s: &Stencil) -> [f64; 4] {
        let mut out = [0.0; 4];
        for c in 0..8 {
            let v = &self.activated[s.index[c]];
            for (o, x) in out.iter_mut().zip(v) {
                *o += s.weight[c] * x;
            }
        }
        out
    }

    /// Writes the checkpoint: header, then raw parameters as little-endian f32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for r in self.resolution {
            out.extend_from_slice(&(r as u32).to_le_bytes());
        }
        for v in self.bounds.min.iter().chain(self.bounds.max.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("not a voxel grid checkpoint".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let version = u32_at(4);
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version} (expected {VERSION})")));
        }
        let resolution = [u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize];
        let min = Vec3::new(f64_at(20), f64_at(28), f64_at(36));
        let max = Vec3::new(f64_at(44), f64_at(52), f64_at(60));
        let n = Self::check_resolution(resolution).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let body = &bytes[HEADER_LEN..];
        if body.len() != 16 * n {
            return Err(Error::Checkpoint(format!("expected {} parameter bytes, found {}", 16 * n, body.len())));
        }
        let params = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let bounds = Aabb::new(min, max).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Self::from_params(resolution, bounds, params).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

impl RadianceField for VoxelGridField {
    fn query(&self, x: &Vec3, _d: &Vec3) -> RadianceSample {
        match self.stencil(x) {
            Some(s) => {
                let v = self.interpolate(&s);
                // trilinear weights can sum to 1 + ulp
                let c = |x: f64| x.min(1.0);
                RadianceSample::new(Vec3::new(c(v[1]), c(v[2]), c(v[3])), v[0])
            }
            None => RadianceSample::EMPTY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub rays_per_batch: usize,
    pub samples_per_ray: usize,
    pub seed: u64,
    /// Weight of the mean sampled density added to the loss.
    #[serde(default)]
    pub density_reg: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            learning_rate: 300_000.0,
            rays_per_batch: 4096,
            samples_per_ray: 96,
            seed: 0,
            density_reg: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.rays_per_batch == 0 || self.samples_per_ray == 0 {
            return Err(Error::invalid("learning rate, batch size and samples per ray must be positive"));
        }
        if !(self.density_reg >= 0.0) {
            return Err(Error::invalid("density regularization must be nonnegative"));
        }
        Ok(())
    }
}

/// One posed training image.
#[derive(Debug, Clone)]
pub struct TrainingView {
    pub camera: Camera,
    pub image: ColorImage,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Batch loss per iteration.
    pub losses: Vec<f64>,
}

/// A ray with its target color and sampling pattern.
#[derive(Debug, Clone, Copy)]
pub struct TrainRay {
    pub ray: Ray,
    pub target: Vec3,
    pub sampling: Sampling,
}

/// Sparse-touch dense accumulator for activated-value gradients.
struct GradBuffer {
    dense: Vec<[f64; 4]>,
    touched: Vec<usize>,
    marked: Vec<bool>,
}

impl GradBuffer {
    fn new(n: usize) -> Self {
        Self {
            dense: vec![[0.0; 4]; n],
            touched: Vec::new(),
            marked: vec![false; n],
        }
    }

    fn add(&mut self, v: usize, g: [f64; 4]) {
        if !self.marked[v] {
            self.marked[v] = true;
            self.touched.push(v);
        }
        let d = &mut self.dense[v];
        for (x, y) in d.iter_mut().zip(g) {
            *x += y;
        }
    }

    fn clear(&mut self) {
        for &v in &self.touched {
            self.dense[v] = [0.0; 4];
            self.marked[v] = false;
        }
        self.touched.clear();
    }
}

impl VoxelGridField {
    /// Loss of one ray: mean squared color error over channels plus
    /// `density_reg` times the mean sampled density. Accumulates
    /// `scale * d(loss)/d(activated)` into `grad`.
    fn ray_loss_grad(&self, tr: &TrainRay, k: usize, density_reg: f64, scale: f64, grad: &mut GradBuffer) -> Result<f64> {
        let samples = sample_ray(&tr.ray, k, tr.sampling)?;
        let stencils: Vec<Option<Stencil>> = samples.positions.iter().map(|x| self.stencil(x)).collect();
        let values: Vec<[f64; 4]> = stencils
            .iter()
            .map(|s| s.as_ref().map_or([0.0; 4], |s| self.interpolate(s)))
            .collect();
        let densities: Vec<f64> = values.iter().map(|v| v[0]).collect();
        let w = composite_weights(&densities, &samples.deltas)?;
        let color = |i: usize| Vec3::new(values[i][1], values[i][2], values[i][3]);
        let rendered = (0..k).fold(Vec3::zeros(), |acc, i| acc + color(i) * w.weights[i]);
        let residual = rendered - tr.target;
        let mean_density = densities.iter().sum::<f64>() / k as f64;
        let loss = residual.norm_squared() / 3.0 + density_reg * mean_density;

        let g = residual * (2.0 / 3.0);
        let mut suffix = Vec3::zeros();
        for i in (0..k).rev() {
            let c = color(i);
            let t_next = w.transmittance[i] * (1.0 - w.alpha[i]);
            let d_sigma = samples.deltas[i] * (t_next * g.dot(&c) - g.dot(&suffix)) + density_reg / k as f64;
            let d_color = g * w.weights[i];
            suffix += c * w.weights[i];
            if let Some(s) = &stencils[i] {
                for corner in 0..8 {
                    let b = s.weight[corner] * scale;
                    grad.add(s.index[corner], [d_sigma * b, d_color.x * b, d_color.y * b, d_color.z * b]);
                }
            }
        }
        Ok(loss)
    }

    /// Mean loss over `rays` and its gradient with respect to the activated
    /// voxel values (dense, one entry per voxel).
    fn batch_activated_grad(&self, rays: &[TrainRay], k: usize, density_reg: f64, buffers: &mut [GradBuffer]) -> Result<f64> {
        let scale = 1.0 / rays.len() as f64;
        let chunk = rays.len().div_ceil(buffers.len()).max(1);
        let losses: Vec<Result<f64>> = buffers
            .par_iter_mut()
            .zip(rays.par_chunks(chunk))
            .map(|(buf, batch)| {
                batch
                    .iter()
                    .map(|tr| self.ray_loss_grad(tr, k, density_reg, scale, buf))
                    .sum::<Result<f64>>()
            })
            .collect();
        let mut total = 0.0;
        for l in losses {
            total += l?;
        }
        Ok(total * scale)
    }

    fn raw_gradient_of(&self, voxel: usize, act: &[f64; 4]) -> [f64; 4] {
        let n = self.voxel_count();
        let p = |c: usize| self.params[c * n + voxel] as f64;
        let mut out = [act[0] * sigmoid(p(0)), 0.0, 0.0, 0.0];
        for c in 1..4 {
            let s = sigmoid(p(c));
            out[c] = act[c] * s * (1.0 - s);
        }
        out
    }

    /// Mean loss over `rays` and its gradient with respect to every raw
    /// parameter (same layout as [`VoxelGridField::params`]).
    pub fn loss_and_gradient(&self, rays: &[TrainRay], k: usize, density_reg: f64) -> Result<(f64, Vec<f64>)> {
        if rays.is_empty() {
            return Err(Error::invalid("no rays"));
        }
        let n = self.voxel_count();
        let mut buffers: Vec<GradBuffer> = (0..GRAD_CHUNKS.min(rays.len())).map(|_| GradBuffer::new(n)).collect();
        let loss = self.batch_activated_grad(rays, k, density_reg, &mut buffers)?;
        let mut act = vec![[0.0; 4]; n];
        for b in &buffers {
            for &v in &b.touched {
                for c in 0..4 {
                    act[v][c] += b.dense[v][c];
                }
            }
        }
        let mut raw = vec![0.0; 4 * n];
        for (v, a) in act.iter().enumerate() {
            let g = self.raw_gradient_of(v, a);
            for c in 0..4 {
                raw[c * n + v] = g[c];
            }
        }
        Ok((loss, raw))
    }
}

/// Minimizes photometric error over random ray batches with plain SGD.
pub fn train(views: &[TrainingView], config: &TrainConfig, init: VoxelGridField) -> Result<(VoxelGridField, TrainLog)> {
    config.validate()?;
    if views.is_empty() {
        return Err(Error::invalid("training needs at least one image"));
    }
    for v in views {
        if (v.image.width, v.image.height) != (v.camera.width(), v.camera.height()) {
            return Err(Error::Data("image size does not match its camera".into()));
        }
    }
    let mut field = init;
    let mut log = TrainLog::default();
    if config.iterations == 0 {
        return Ok((field, log));
    }
    let n = field.voxel_count();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut buffers: Vec<GradBuffer> = (0..GRAD_CHUNKS).map(|_| GradBuffer::new(n)).collect();
    let mut act = GradBuffer::new(n);
    let mut rays = Vec::with_capacity(config.rays_per_batch);

    for iteration in 0..config.iterations {
        rays.clear();
        for _ in 0..config.rays_per_batch {
            let view = &views[rng.random_range(0..views.len())];
            let px = rng.random_range(0..view.camera.width());
            let py = rng.random_range(0..view.camera.height());
            rays.push(TrainRay {
                ray: view.camera.pixel_ray(px, py)?,
                target: view.image.get(px, py),
                sampling: Sampling::Stratified { seed: rng.random() },
            });
        }
        let loss = field.batch_activated_grad(&rays, config.samples_per_ray, config.density_reg, &mut buffers)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration, loss });
        }
        log.losses.push(loss);

        for b in buffers.iter_mut() {
            for &v in &b.touched {
                act.add(v, b.dense[v]);
            }
            b.clear();
        }
        let mut finite = true;
        for &v in &act.touched {
            let g = field.raw_gradient_of(v, &act.dense[v]);
            for (c, gc) in g.iter().enumerate() {
                let p = &mut field.params[c * n + v];
                *p = (*p as f64 - config.learning_rate * gc) as f32;
                finite &= p.is_finite();
            }
            field.refresh(v);
        }
        act.clear();
        if !finite {
            // the next loss cannot be evaluated
            return Err(Error::NonFiniteLoss { iteration: iteration + 1, loss: f64::NAN });
        }
    }
    Ok((field, log))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub samples: usize,
    pub epsilon: f64,
    /// How many parameters to check (drawn from those the ray touches).
    pub params: usize,
    pub seed: u64,
    pub density_reg: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            samples: 32,
            epsilon: 1e-4,
            params: 100,
            seed: 0,
            density_reg: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckEntry {
    pub param: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub entries: Vec<GradCheckEntry>,
}

/// Gradients below this magnitude are compared absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-8;

/// Loss of one ray computed through the generic query path, independent of
/// the hand-written backward pass.
fn reference_loss(field: &VoxelGridField, ray: &Ray, target: &Vec3, k: usize, density_reg: f64) -> Result<f64> {
    let samples = sample_ray(ray, k, Sampling::Midpoint)?;
    let values: Vec<RadianceSample> = samples.positions.iter().map(|x| field.query(x, &ray.direction)).collect();
    let densities: Vec<f64> = values.iter().map(|s| s.density).collect();
    let w = composite_weights(&densities, &samples.deltas)?;
    let c = values.iter().zip(&w.weights).fold(Vec3::zeros(), |a, (s, &w)| a + s.color * w);
    Ok((c - target).norm_squared() / 3.0 + density_reg * densities.iter().sum::<f64>() / k as f64)
}

/// Compares analytic raw-parameter gradients of the single-ray loss against
/// central finite differences on a random subset of the parameters the ray
/// touches.
pub fn gradient_check(field: &VoxelGridField, ray: &Ray, target: &Vec3, config: &GradCheckConfig) -> Result<GradCheckReport> {
    let samples = sample_ray(ray, config.samples, Sampling::Midpoint)?;
    let n = field.voxel_count();
    let mut touched: Vec<usize> = samples
        .positions
        .iter()
        .filter_map(|x| field.stencil(x))
        .flat_map(|s| s.index)
        .collect();
    touched.sort_unstable();
    touched.dedup();
    let mut candidates: Vec<usize> = touched.iter().flat_map(|&v| (0..4).map(move |c| c * n + v)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let take = config.params.min(candidates.len());
    for i in 0..take {
        let j = rng.random_range(i..candidates.len());
        candidates.swap(i, j);
    }
    candidates.truncate(take);
    gradient_check_params(field, ray, target, config, &candidates)
}

pub fn gradient_check_params(
    field: &VoxelGridField,
    ray: &Ray,
    target: &Vec3,
    config: &GradCheckConfig,
    params: &[usize],
) -> Result<GradCheckReport> {
    if !(config.epsilon > 0.0) {
        return Err(Error::invalid("epsilon must be positive"));
    }
    let tr = TrainRay {
        ray: *ray,
        target: *target,
        sampling: Sampling::Midpoint,
    };
    let (_, analytic) = field.loss_and_gradient(&[tr], config.samples, config.density_reg)?;
    let mut probe = field.clone();
    let mut entries = Vec::with_capacity(params.len());
    for &p in params {
        let original = field.params[p];
        let plus = (original as f64 + config.epsilon) as f32;
        let minus = (original as f64 - config.epsilon) as f32;
        probe.set_param(p, plus);
        let lp = reference_loss(&probe, ray, target, config.samples, config.density_reg)?;
        probe.set_param(p, minus);
        let lm = reference_loss(&probe, ray, target, config.samples, config.density_reg)?;
        probe.set_param(p, original);
        // divide by the step actually taken after f32 rounding
        let numeric = (lp - lm) / (plus as f64 - minus as f64);
        let a = analytic[p];
        let rel_error = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        entries.push(GradCheckEntry {
            param: p,
            analytic: a,
            numeric,
            rel_error,
        });
    }
    Ok(GradCheckReport {
        max_rel_error: entries.iter().map(|e| e.rel_error).fold(0.0, f64::max),
        entries,
    })
}
