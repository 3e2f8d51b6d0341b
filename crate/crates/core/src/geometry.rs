//! Pinhole cameras, ray generation, depth sampling and volume compositing.
//!
//! Conventions: world `y` is up. The camera sits at
//! `R_y(yaw) * R_x(-pitch) * (0, 0, radius)` and looks at the origin, so
//! `pitch = yaw = 0` puts it on the `+z` axis, positive yaw moves it towards
//! `+x` and positive pitch moves it up. In camera space the view axis is `-z`.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use surfgan_grad::{Tensor, Var};

use crate::error::{Error, Result};

/// Interval assigned to the last sample under [`IntervalRule::ForwardSentinel`].
pub const SENTINEL_INTERVAL: f64 = 1e10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraView {
    /// Radians.
    pub pitch: f64,
    /// Radians.
    pub yaw: f64,
    /// Vertical field of view in degrees.
    pub fov_deg: f64,
    pub radius: f64,
    pub near: f64,
    pub far: f64,
}

impl Default for CameraView {
    fn default() -> Self {
        Self {
            pitch: 0.0,
            yaw: 0.0,
            fov_deg: 12.0,
            radius: 1.0,
            near: 0.88,
            far: 1.12,
        }
    }
}

impl CameraView {
    pub fn new(pitch: f64, yaw: f64) -> Self {
        Self {
            pitch,
            yaw,
            ..Self::default()
        }
    }

    /// Same intrinsics and bounds, different angles.
    pub fn with_angles(&self, pitch: f64, yaw: f64) -> Self {
        Self { pitch, yaw, ..*self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pitch.is_finite() && self.yaw.is_finite()) {
            return Err(Error::invalid(format!(
                "camera angles must be finite (pitch {}, yaw {})",
                self.pitch, self.yaw
            )));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(Error::invalid(format!("fov {} outside (0, 180)", self.fov_deg)));
        }
        if !(self.near < self.far) || !self.near.is_finite() || !self.far.is_finite() {
            return Err(Error::invalid(format!(
                "need near < far, got near {} far {}",
                self.near, self.far
            )));
        }
        if !(self.radius > 0.0) {
            return Err(Error::invalid(format!("radius {} must be positive", self.radius)));
        }
        Ok(())
    }
}

/// Camera-to-world transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn apply_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Direction the camera looks along, in world space.
    pub fn forward(&self) -> Vector3<f64> {
        self.rotation * Vector3::new(0.0, 0.0, -1.0)
    }
}

fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn camera_from_view(view: &CameraView) -> RigidTransform {
    let rotation = rot_y(view.yaw) * rot_x(-view.pitch);
    let translation = rotation * Vector3::new(0.0, 0.0, view.radius);
    RigidTransform {
        rotation,
        translation,
    }
}

#[derive(Clone, Debug)]
pub struct RayBatch {
    pub origins: Vec<Vector3<f64>>,
    /// Unit length.
    pub directions: Vec<Vector3<f64>>,
    pub height: usize,
    pub width: usize,
    pub near: f64,
    pub far: f64,
}

impl RayBatch {
    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }
}

/// Normalized image-plane coordinate of pixel `i` out of `n`. Outermost
/// pixel centers sit on the field-of-view boundary; a single pixel is on axis.
fn plane_coord(i: usize, n: usize) -> f64 {
    if n == 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

/// One ray per pixel, row-major from the top-left pixel.
pub fn generate_rays(view: &CameraView, height: usize, width: usize) -> Result<RayBatch> {
    view.validate()?;
    if height == 0 || width == 0 {
        return Err(Error::invalid(format!(
            "resolution must be positive, got {height}x{width}"
        )));
    }
    let cam = camera_from_view(view);
    let half = (view.fov_deg.to_radians() * 0.5).tan();
    let aspect = width as f64 / height as f64;
    let mut directions = Vec::with_capacity(height * width);
    for row in 0..height {
        let y = -plane_coord(row, height) * half;
        for col in 0..width {
            let x = plane_coord(col, width) * half * aspect;
            let d = Vector3::new(x, y, -1.0).normalize();
            directions.push(cam.apply_vector(&d));
        }
    }
    Ok(RayBatch {
        origins: vec![cam.translation; height * width],
        directions,
        height,
        width,
        near: view.near,
        far: view.far,
    })
}

/// Depths along each ray; `depths[r * per_ray + k]` is sample `k` of ray `r`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub depths: Vec<f64>,
    pub per_ray: usize,
}

impl SampleSet {
    pub fn ray_depths(&self, ray: usize) -> &[f64] {
        &self.depths[ray * self.per_ray..(ray + 1) * self.per_ray]
    }

    pub fn num_rays(&self) -> usize {
        if self.per_ray == 0 {
            0
        } else {
            self.depths.len() / self.per_ray
        }
    }

    /// World positions `origin + depth * direction`.
    pub fn positions(&self, rays: &RayBatch) -> Vec<Vector3<f64>> {
        self.depths
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let r = i / self.per_ray;
                rays.origins[r] + rays.directions[r] * t
            })
            .collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.num_rays(), self.per_ray], self.depths.clone())
    }
}

/// One depth per equal-width bin of `[near, far]`, jittered uniformly inside
/// the bin when `rng` is given and at the bin midpoint otherwise.
pub fn stratified_sample<R: Rng + ?Sized>(
    rays: &RayBatch,
    n: usize,
    mut rng: Option<&mut R>,
) -> Result<SampleSet> {
    if n == 0 {
        return Err(Error::invalid("stratified_sample needs n >= 1"));
    }
    let width = (rays.far - rays.near) / n as f64;
    let mut depths = Vec::with_capacity(rays.len() * n);
    for _ in 0..rays.len() {
        for k in 0..n {
            let u = match rng.as_deref_mut() {
                Some(r) => r.random::<f64>(),
                None => 0.5,
            };
            depths.push(rays.near + (k as f64 + u) * width);
        }
    }
    Ok(SampleSet { depths, per_ray: n })
}

/// Cell boundaries around sorted samples: near, midpoints, far.
fn cell_edges(depths: &[f64], near: f64, far: f64) -> Vec<f64> {
    let mut edges = Vec::with_capacity(depths.len() + 1);
    edges.push(near);
    edges.extend(depths.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    edges.push(far);
    edges
}

/// Draws `n` extra depths per ray by inverting the piecewise-constant CDF
/// whose mass in each coarse cell is proportional to that sample's weight,
/// then merges them with the coarse depths in sorted order.
///
/// A ray whose weights are all zero falls back to a uniform density.
pub fn hierarchical_sample<R: Rng + ?Sized>(
    rays: &RayBatch,
    coarse: &SampleSet,
    weights: &[f64],
    n: usize,
    mut rng: Option<&mut R>,
) -> Result<SampleSet> {
    if weights.len() != coarse.depths.len() {
        return Err(Error::invalid(format!(
            "{} weights for {} coarse samples",
            weights.len(),
            coarse.depths.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0)) {
        return Err(Error::invalid(format!("sampling weight {w} is negative or NaN")));
    }
    let m = coarse.per_ray;
    let per_ray = m + n;
    let mut depths = Vec::with_capacity(coarse.num_rays() * per_ray);
    let mut cdf = vec![0.0; m + 1];
    for r in 0..coarse.num_rays() {
        let cd = coarse.ray_depths(r);
        let edges = cell_edges(cd, rays.near, rays.far);
        let w = &weights[r * m..(r + 1) * m];
        let total: f64 = w.iter().sum();
        for k in 0..m {
            let mass = if total > 0.0 {
                w[k] / total
            } else {
                (edges[k + 1] - edges[k]) / (rays.far - rays.near)
            };
            cdf[k + 1] = cdf[k] + mass;
        }
        cdf[m] = 1.0;
        let start = depths.len();
        depths.extend_from_slice(cd);
        for i in 0..n {
            let u = match rng.as_deref_mut() {
                Some(g) => g.random::<f64>(),
                None => (i as f64 + 0.5) / n as f64,
            };
            // First cell whose upper CDF value exceeds u; zero-mass cells are skipped.
            let k = cdf[1..].partition_point(|&c| c <= u).min(m - 1);
            let mass = cdf[k + 1] - cdf[k];
            let t = if mass > 0.0 { ((u - cdf[k]) / mass).clamp(0.0, 1.0) } else { 0.5 };
            depths.push(edges[k] + t * (edges[k + 1] - edges[k]));
        }
        depths[start..].sort_by(|a, b| a.total_cmp(b));
    }
    Ok(SampleSet { depths, per_ray })
}

/// How each sample's integration interval is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalRule {
    /// Each sample owns the cell between the midpoints to its neighbours,
    /// clipped to `[near, far]`; residual transmittance goes to the background.
    #[default]
    Cells,
    /// `t_{k+1} - t_k`, with a huge interval for the last sample so it
    /// absorbs all residual transmittance.
    ForwardSentinel,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompositeOptions {
    pub background: [f64; 3],
    pub intervals: IntervalRule,
}

impl Default for CompositeOptions {
    fn default() -> Self {
        Self {
            background: [0.0; 3],
            intervals: IntervalRule::Cells,
        }
    }
}

pub struct Composite {
    /// `[rays, 3]`
    pub rgb: Var,
    /// `[rays]`, expected depth under the weights.
    pub depth: Var,
    /// `[rays, samples]`
    pub weights: Var,
}

/// Interval lengths for `depths` of shape `[rays, samples]`.
pub fn intervals(depths: &Tensor, near: f64, far: f64, rule: IntervalRule) -> Tensor {
    let s = *depths.shape().last().expect("depths need a sample axis");
    let mut out = Vec::with_capacity(depths.numel());
    for ray in depths.data().chunks(s) {
        match rule {
            IntervalRule::Cells => {
                let e = cell_edges(ray, near, far);
                out.extend(e.windows(2).map(|w| w[1] - w[0]));
            }
            IntervalRule::ForwardSentinel => {
                out.extend(ray.windows(2).map(|w| w[1] - w[0]));
                out.push(SENTINEL_INTERVAL);
            }
        }
    }
    Tensor::new(depths.shape(), out)
}

/// Emission-absorption compositing.
///
/// `colors` is `[rays, samples, 3]`, `densities` and `depths` are
/// `[rays, samples]` with depths increasing along each ray.
pub fn composite(
    colors: &Var,
    densities: &Var,
    depths: &Tensor,
    near: f64,
    far: f64,
    opts: &CompositeOptions,
) -> Result<Composite> {
    let shape = depths.shape();
    if shape.len() != 2 || densities.shape() != shape {
        return Err(Error::invalid(format!(
            "densities {:?} and depths {:?} must both be [rays, samples]",
            densities.shape(),
            shape
        )));
    }
    let (rays, samples) = (shape[0], shape[1]);
    if colors.shape() != [rays, samples, 3] {
        return Err(Error::invalid(format!(
            "colors {:?} must be [{rays}, {samples}, 3]",
            colors.shape()
        )));
    }
    if let Some(s) = densities.value().data().iter().find(|s| !(**s >= 0.0)) {
        return Err(Error::invalid(format!("density {s} is negative or NaN")));
    }
    if depths
        .data()
        .chunks(samples.max(1))
        .any(|r| r.windows(2).any(|w| !(w[1] > w[0])))
    {
        return Err(Error::invalid("depths must increase strictly along each ray"));
    }
    let deltas = Var::constant(intervals(depths, near, far, opts.intervals));
    let optical = densities.mul(&deltas);
    let alpha = optical.neg().exp().neg().add_scalar(1.0);
    let transmittance = optical.cumsum_exclusive().neg().exp();
    let weights = transmittance.mul(&alpha);
    let mut rgb = weights
        .reshape(&[rays, samples, 1])
        .mul(colors)
        .sum_axis(1)
        .reshape(&[rays, 3]);
    if opts.background.iter().any(|&b| b != 0.0) {
        let residual = weights.sum_axis(1).neg().add_scalar(1.0);
        let bg = Var::constant(Tensor::new(&[1, 3], opts.background.to_vec()));
        rgb = rgb.add(&residual.mul(&bg));
    }
    let depth = weights
        .mul(&Var::constant(depths.clone()))
        .sum_axis(1)
        .reshape(&[rays]);
    Ok(Composite {
        rgb,
        depth,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    const NO_RNG: Option<&mut ChaCha8Rng> = None;

    fn close(a: &Vector3<f64>, b: &Vector3<f64>, tol: f64) -> bool {
        (a - b).norm() < tol
    }

    #[test]
    fn frontal_camera_on_plus_z() {
        let cam = camera_from_view(&CameraView::new(0.0, 0.0));
        assert!(close(&cam.translation, &Vector3::new(0.0, 0.0, 1.0), 1e-15));
        assert!(close(&cam.forward(), &Vector3::new(0.0, 0.0, -1.0), 1e-15));
    }

    #[test]
    fn quarter_yaw_moves_camera_to_plus_x() {
        let cam = camera_from_view(&CameraView::new(0.0, FRAC_PI_2));
        assert!(close(&cam.translation, &Vector3::new(1.0, 0.0, 0.0), 1e-12));
        assert!(close(&cam.forward(), &Vector3::new(-1.0, 0.0, 0.0), 1e-12));
    }

    #[test]
    fn positive_pitch_raises_camera() {
        let cam = camera_from_view(&CameraView::new(0.3, 0.0));
        assert!(cam.translation.y > 0.0);
        assert!((cam.translation.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_resolution_and_view() {
        let v = CameraView::default();
        assert!(generate_rays(&v, 0, 4).is_err());
        let bad = CameraView { near: 2.0, far: 1.0, ..v };
        assert!(generate_rays(&bad, 4, 4).is_err());
        let nan = CameraView { yaw: f64::NAN, ..v };
        assert!(nan.validate().is_err());
    }

    #[test]
    fn single_pixel_ray_is_optical_axis() {
        let v = CameraView::new(0.2, -0.4);
        let rays = generate_rays(&v, 1, 1).unwrap();
        let cam = camera_from_view(&v);
        assert!(close(&rays.directions[0], &cam.forward(), 1e-12));
    }

    #[test]
    fn stratified_midpoints_without_jitter() {
        let rays = generate_rays(&CameraView::default(), 1, 1).unwrap();
        let s = stratified_sample(&rays, 1, NO_RNG).unwrap();
        assert!((s.depths[0] - 1.0).abs() < 1e-15);
        let s = stratified_sample(&rays, 12, NO_RNG).unwrap();
        let w = 0.24 / 12.0;
        for (k, d) in s.depths.iter().enumerate() {
            assert!((d - (0.88 + (k as f64 + 0.5) * w)).abs() < 1e-12);
        }
        assert!(stratified_sample(&rays, 0, NO_RNG).is_err());
    }

    #[test]
    fn zero_weights_fall_back_to_uniform() {
        let rays = generate_rays(&CameraView::default(), 1, 1).unwrap();
        let coarse = stratified_sample(&rays, 4, NO_RNG).unwrap();
        let s = hierarchical_sample(&rays, &coarse, &[0.0; 4], 4, NO_RNG).unwrap();
        assert_eq!(s.per_ray, 8);
        assert!(s.depths.windows(2).all(|w| w[1] >= w[0]));
        assert!(s.depths.iter().all(|d| (0.88..=1.12).contains(d)));
    }

    #[test]
    fn negative_weights_rejected() {
        let rays = generate_rays(&CameraView::default(), 1, 1).unwrap();
        let coarse = stratified_sample(&rays, 2, NO_RNG).unwrap();
        assert!(hierarchical_sample(&rays, &coarse, &[1.0, -1.0], 2, NO_RNG).is_err());
    }

    #[test]
    fn transparent_ray_shows_background() {
        let depths = Tensor::new(&[1, 3], vec![0.2, 0.5, 0.8]);
        let colors = Var::constant(Tensor::full(&[1, 3, 3], 0.7));
        let sigma = Var::constant(Tensor::zeros(&[1, 3]));
        let opts = CompositeOptions {
            background: [0.1, 0.2, 0.3],
            ..Default::default()
        };
        let c = composite(&colors, &sigma, &depths, 0.0, 1.0, &opts).unwrap();
        assert_eq!(c.rgb.value().data(), &[0.1, 0.2, 0.3]);
        assert_eq!(c.weights.value().sum(), 0.0);
    }

    #[test]
    fn opaque_first_sample_takes_everything() {
        let depths = Tensor::new(&[1, 3], vec![0.2, 0.5, 0.8]);
        let colors = Var::constant(Tensor::new(
            &[1, 3, 3],
            vec![0.9, 0.1, 0.4, 0.2, 0.2, 0.2, 0.5, 0.5, 0.5],
        ));
        let sigma = Var::constant(Tensor::new(&[1, 3], vec![1e12, 1.0, 1.0]));
        for rule in [IntervalRule::Cells, IntervalRule::ForwardSentinel] {
            let opts = CompositeOptions { intervals: rule, ..Default::default() };
            let c = composite(&colors, &sigma, &depths, 0.0, 1.0, &opts).unwrap();
            let w = c.weights.value().data();
            assert!((w[0] - 1.0).abs() < 1e-12 && w[1].abs() < 1e-12);
            assert!(c.rgb.value().max_abs_diff(&Tensor::new(&[1, 3], vec![0.9, 0.1, 0.4])) < 1e-12);
        }
    }

    #[test]
    fn sentinel_rule_absorbs_residual_in_last_sample() {
        let depths = Tensor::new(&[1, 2], vec![0.25, 0.75]);
        let d = intervals(&depths, 0.0, 1.0, IntervalRule::ForwardSentinel);
        assert_eq!(d.data(), &[0.5, SENTINEL_INTERVAL]);
        let d = intervals(&depths, 0.0, 1.0, IntervalRule::Cells);
        assert_eq!(d.data(), &[0.5, 0.5]);
    }

    #[test]
    fn composite_rejects_negative_density() {
        let depths = Tensor::new(&[1, 2], vec![0.2, 0.5]);
        let colors = Var::constant(Tensor::zeros(&[1, 2, 3]));
        let sigma = Var::constant(Tensor::new(&[1, 2], vec![1.0, -0.1]));
        assert!(composite(&colors, &sigma, &depths, 0.0, 1.0, &CompositeOptions::default()).is_err());
    }
}
