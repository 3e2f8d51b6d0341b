//! Distillation of explicit pose control into a style-based 2D generator.
//!
//! A residual mapper `T` sends the editable slice of a latent code to its
//! frontal (canonical) version, and two learnable sets of sub-directions turn
//! a target view `[pitch, yaw]` into an additive latent offset:
//! `w_t = w_c + pitch * sum_i lp_i dp_i + yaw * sum_i ly_i dy_i`.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use surfgan_grad::{backward, no_grad, Adam, Tensor, Var};

use crate::adapters::{InversionEncoder, PerceptualFeatures, StyleDecoder};
use crate::checkpoint::Checkpoint;
use crate::data::resize_image;
use crate::error::{AdapterError, Error, Result};
use crate::generator::{identity, orthonormal_columns, render_image, ControlCode, GeneratorState, RenderOptions};
use crate::geometry::CameraView;
use crate::nn::{self, adam_step, module_fields, Linear, Module};

/// Per-layer style vectors `[layers, width]`; only the first `editable`
/// layers take part in pose edits.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    data: Tensor,
    editable: usize,
}

impl LatentCode {
    pub fn new(layers: usize, width: usize, editable: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != layers * width || editable == 0 || editable > layers {
            return Err(Error::invalid(format!(
                "latent code of {} values cannot be {layers} x {width} with {editable} editable layers",
                values.len()
            )));
        }
        Ok(Self {
            data: Tensor::new(&[layers, width], values),
            editable,
        })
    }

    pub fn zeros(layers: usize, width: usize, editable: usize) -> Self {
        Self::new(layers, width, editable, vec![0.0; layers * width]).expect("valid layout")
    }

    pub fn layers(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn editable_layers(&self) -> usize {
        self.editable
    }

    pub fn slice_len(&self) -> usize {
        self.editable * self.width()
    }

    pub fn values(&self) -> &[f64] {
        self.data.data()
    }

    pub fn editable_slice(&self) -> &[f64] {
        &self.data.data()[..self.slice_len()]
    }

    pub fn set_editable(&mut self, slice: &[f64]) -> Result<()> {
        let n = self.slice_len();
        if slice.len() != n {
            return Err(Error::invalid(format!(
                "editable slice has {n} values, got {}",
                slice.len()
            )));
        }
        self.data.data_mut()[..n].copy_from_slice(slice);
        Ok(())
    }

    pub fn to_tensor(&self) -> Tensor {
        self.data.clone()
    }

    pub(crate) fn tensor_ref(&self) -> &Tensor {
        &self.data
    }

    fn same_layout(&self, other: &LatentCode) -> bool {
        self.data.shape() == other.data.shape() && self.editable == other.editable
    }
}

/// Stacks codes into `[B, layers, width]`.
pub fn stack_codes(codes: &[LatentCode]) -> Result<Tensor> {
    let first = codes.first().ok_or_else(|| Error::invalid("no latent codes"))?;
    if codes.iter().any(|c| !c.same_layout(first)) {
        return Err(Error::invalid("latent codes have different layouts"));
    }
    let data = codes.iter().flat_map(|c| c.values().iter().copied()).collect();
    Ok(Tensor::new(&[codes.len(), first.layers(), first.width()], data))
}

fn unstack_codes(t: &Tensor, editable: usize) -> Vec<LatentCode> {
    let (b, l, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    (0..b)
        .map(|i| {
            LatentCode::new(l, w, editable, t.data()[i * l * w..(i + 1) * l * w].to_vec())
                .expect("layout comes from a valid tensor")
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InjectionWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
    pub lambda6: f64,
    pub lambda7: f64,
}

impl Default for InjectionWeights {
    fn default() -> Self {
        Self {
            lambda1: 10.0,
            lambda2: 1.0,
            lambda3: 1.0,
            lambda4: 10.0,
            lambda5: 1.0,
            lambda6: 1.0,
            lambda7: 100.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InjectionConfig {
    pub layers: usize,
    pub width: usize,
    pub editable: usize,
    pub mapper_hidden: usize,
    /// Sub-directions per pose angle.
    pub directions: usize,
    /// Initial learning rate; it follows a cosine down to `lr * final_lr_fraction` at `steps`.
    pub lr: f64,
    /// 1 keeps the rate constant.
    pub final_lr_fraction: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub pitch_range_deg: f64,
    pub yaw_range_deg: f64,
    /// Triplets are rendered at this resolution, then resized for the encoder.
    pub triplet_resolution: usize,
    /// Decoder output resolution for mock backends.
    pub decoder_resolution: usize,
    pub weights: InjectionWeights,
    /// Recheck frozen backends every this many steps (and at the end).
    pub frozen_check_every: u64,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        Self {
            layers: 18,
            width: 512,
            editable: 4,
            mapper_hidden: 512,
            directions: 5,
            lr: 1e-4,
            final_lr_fraction: 0.01,
            steps: 1000,
            batch_size: 8,
            pitch_range_deg: 30.0,
            yaw_range_deg: 45.0,
            triplet_resolution: 256,
            decoder_resolution: 32,
            weights: InjectionWeights::default(),
            frozen_check_every: 100,
        }
    }
}

impl InjectionConfig {
    pub fn slice_len(&self) -> usize {
        self.editable * self.width
    }

    /// Learning rate of update `step`; stays at the final value past `steps`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let t = if self.steps == 0 { 1.0 } else { (step as f64 / self.steps as f64).min(1.0) };
        let lo = self.lr * self.final_lr_fraction;
        lo + 0.5 * (self.lr - lo) * (1.0 + (std::f64::consts::PI * t).cos())
    }

    pub fn validate(&self) -> Result<()> {
        if self.editable == 0 || self.editable > self.layers || self.width == 0 {
            return Err(Error::Config(format!(
                "injection needs 0 < editable ({}) <= layers ({}) and width > 0",
                self.editable, self.layers
            )));
        }
        if self.directions == 0 || self.directions > self.slice_len() {
            return Err(Error::Config(format!(
                "injection.directions must be in 1..={}",
                self.slice_len()
            )));
        }
        if self.batch_size == 0 || self.mapper_hidden == 0 {
            return Err(Error::Config("injection batch size and mapper width must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("injection.lr must be positive".into()));
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return Err(Error::Config("injection.final_lr_fraction must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Five fully connected layers on the flattened editable slice, leaky ReLU
/// between them. The last layer starts at zero so the residual map starts as
/// the identity.
#[derive(Clone, Debug)]
pub struct CanonicalMapper {
    pub layers: Vec<Linear>,
}

module_fields!(CanonicalMapper { layers });

impl CanonicalMapper {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, slice: usize, hidden: usize) -> Self {
        let dims = [slice, hidden, hidden, hidden, hidden, slice];
        let mut layers: Vec<Linear> = dims
            .windows(2)
            .map(|d| Linear::normal(rng, d[0], d[1], (2.0 / d[0] as f64).sqrt()))
            .collect();
        *layers.last_mut().unwrap() = Linear::zeros(hidden, slice);
        Self { layers }
    }

    /// `[B, slice]` to the residual `[B, slice]`.
    pub fn forward(&self, x: &Var) -> Var {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h);
            if i < last {
                h = h.leaky_relu(0.2);
            }
        }
        h
    }
}

/// Rows of `p` and `y` are the pitch and yaw sub-directions over the
/// flattened editable slice.
#[derive(Clone, Debug)]
pub struct PoseBasis {
    pub p: Var,
    pub y: Var,
    pub lp: Var,
    pub ly: Var,
}

module_fields!(PoseBasis { p, y, lp, ly });

impl PoseBasis {
    /// Orthonormal directions, scales `1 / N`.
    pub fn new<R: Rng + ?Sized>(rng: &mut R, n: usize, slice: usize) -> Self {
        let p = transpose(&orthonormal_columns(rng, slice, n));
        let y = transpose(&orthonormal_columns(rng, slice, n));
        let l = Tensor::full(&[n], 1.0 / n as f64);
        Self {
            p: Var::param(p),
            y: Var::param(y),
            lp: Var::param(l.clone()),
            ly: Var::param(l),
        }
    }

    pub fn from_parts(p: Tensor, y: Tensor, lp: Tensor, ly: Tensor) -> Self {
        Self {
            p: Var::param(p),
            y: Var::param(y),
            lp: Var::param(lp),
            ly: Var::param(ly),
        }
    }

    pub fn n(&self) -> usize {
        self.lp.numel()
    }

    /// Combined pitch and yaw vectors, `[1, slice]` each.
    pub fn pose_vectors(&self) -> (Var, Var) {
        let n = self.n();
        let p = self.lp.reshape(&[1, n]).matmul(&self.p);
        let y = self.ly.reshape(&[1, n]).matmul(&self.y);
        (p, y)
    }

    /// `|P P^T - I|_1 + |Y Y^T - I|_1` over direction rows.
    pub fn direction_penalty(&self) -> Var {
        let eye = Var::constant(identity(self.n()));
        let gp = Var::mm(&self.p, &self.p, false, true).sub(&eye).abs().sum();
        let gy = Var::mm(&self.y, &self.y, false, true).sub(&eye).abs().sum();
        gp.add(&gy)
    }
}

fn transpose(t: &Tensor) -> Tensor {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    Tensor::from_fn(&[c, r], |i| t.data()[(i % r) * c + i / r])
}

#[derive(Clone, Debug)]
pub struct InjectionModel {
    pub mapper: CanonicalMapper,
    pub basis: PoseBasis,
}

module_fields!(InjectionModel { mapper, basis });

fn replace_slice(w: &Var, slice: &Var, editable: usize) -> Var {
    let s = w.shape();
    let (b, l, width) = (s[0], s[1], s[2]);
    let head = slice.reshape(&[b, editable, width]);
    if editable == l {
        head
    } else {
        Var::concat(&[head, w.narrow(1, editable, l - editable)], 1)
    }
}

fn editable_of(w: &Var, editable: usize) -> Var {
    let s = w.shape();
    w.narrow(1, 0, editable).reshape(&[s[0], editable * s[2]])
}

impl InjectionModel {
    pub fn new<R: Rng + ?Sized>(cfg: &InjectionConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            mapper: CanonicalMapper::new(rng, cfg.slice_len(), cfg.mapper_hidden),
            basis: PoseBasis::new(rng, cfg.directions, cfg.slice_len()),
        })
    }

    fn slice_len(&self) -> usize {
        self.basis.p.shape()[1]
    }

    fn check_codes(&self, w: &Var, editable: usize) -> Result<()> {
        let s = w.shape();
        if s.len() != 3 || editable * s[2] != self.slice_len() || editable > s[1] {
            return Err(Error::invalid(format!(
                "codes of shape {s:?} do not match an editable slice of {} values",
                self.slice_len()
            )));
        }
        Ok(())
    }

    /// Residual canonicalization of `w: [B, layers, width]` on the editable layers.
    pub fn canonicalize_var(&self, w: &Var, editable: usize) -> Result<Var> {
        self.check_codes(w, editable)?;
        let slice = editable_of(w, editable);
        let out = slice.add(&self.mapper.forward(&slice));
        Ok(replace_slice(w, &out, editable))
    }

    /// Adds the pose offset for `views: [B, 2]` (pitch, yaw) to the editable layers.
    pub fn apply_pose_var(&self, w_c: &Var, views: &Tensor, editable: usize) -> Result<Var> {
        self.check_codes(w_c, editable)?;
        let b = w_c.shape()[0];
        if views.shape() != [b, 2] {
            return Err(Error::invalid(format!("views must be [{b}, 2], got {:?}", views.shape())));
        }
        if views.data().iter().all(|&v| v == 0.0) {
            return Ok(w_c.clone());
        }
        let (p, y) = self.basis.pose_vectors();
        let v = Var::constant(views.clone());
        let offset = v.narrow(1, 0, 1).mul(&p).add(&v.narrow(1, 1, 1).mul(&y));
        let slice = editable_of(w_c, editable).add(&offset);
        Ok(replace_slice(w_c, &slice, editable))
    }

    pub fn canonicalize(&self, w: &LatentCode) -> Result<LatentCode> {
        let _g = no_grad();
        let t = Var::constant(stack_codes(std::slice::from_ref(w))?);
        let out = self.canonicalize_var(&t, w.editable_layers())?;
        Ok(unstack_codes(out.value(), w.editable_layers()).remove(0))
    }

    /// `w_c + pitch * p + yaw * y` on the editable slice; `[0, 0]` returns `w_c` unchanged.
    pub fn apply_pose(&self, w_c: &LatentCode, view: (f64, f64)) -> Result<LatentCode> {
        if view == (0.0, 0.0) {
            return Ok(w_c.clone());
        }
        if w_c.slice_len() != self.slice_len() {
            return Err(Error::invalid("latent layout does not match the pose basis"));
        }
        let (p, y) = {
            let _g = no_grad();
            self.basis.pose_vectors()
        };
        let mut out = w_c.clone();
        let slice: Vec<f64> = w_c
            .editable_slice()
            .iter()
            .zip(p.value().data().iter().zip(y.value().data()))
            .map(|(w, (pv, yv))| w + view.0 * pv + view.1 * yv)
            .collect();
        out.set_editable(&slice)?;
        Ok(out)
    }
}

/// Weighted loss terms in a fixed order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub names: Vec<String>,
    pub weighted: Vec<f64>,
    pub total: f64,
}

pub const PART_NAMES: [&str; 7] = [
    "canonical_latent",
    "canonical_pixel",
    "canonical_perceptual",
    "target_latent",
    "target_pixel",
    "target_perceptual",
    "direction_reg",
];

/// Batch mean of per-sample `sum |a - b|`.
fn l1_per_sample(a: &Var, b: &Var) -> Var {
    let n = a.shape()[0] as f64;
    a.sub(b).abs().sum().scale(1.0 / n)
}

/// Batch mean of per-sample `sum (a - b)^2`.
fn l2sq_per_sample(a: &Var, b: &Var) -> Var {
    let n = a.shape()[0] as f64;
    a.sub(b).square().sum().scale(1.0 / n)
}

fn check_same(role: &'static str, a: &Var, b: &Var) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(AdapterError::Shape {
            role,
            got: b.shape().to_vec(),
            expected: a.shape().to_vec(),
        }
        .into());
    }
    Ok(())
}

/// `l1 |w_c - w_c_hat|_1 + l2 |I_c' - I_c_hat|^2 + l3 |F(I_c') - F(I_c_hat)|^2`.
///
/// Returns the total and the three weighted terms.
pub fn canonical_loss(
    w_c: &Var,
    w_c_hat: &Var,
    image_ref: &Var,
    image_hat: &Var,
    features: &dyn PerceptualFeatures,
    weights: &InjectionWeights,
) -> Result<(Var, [Var; 3])> {
    check_same("canonical codes", w_c, w_c_hat)?;
    check_same("canonical images", image_ref, image_hat)?;
    let latent = l1_per_sample(w_c, w_c_hat).scale(weights.lambda1);
    let pixel = l2sq_per_sample(image_ref, image_hat).scale(weights.lambda2);
    let fa = features.features(image_ref)?;
    let fb = features.features(image_hat)?;
    let perceptual = l2sq_per_sample(&fa, &fb).scale(weights.lambda3);
    let total = latent.add(&pixel).add(&perceptual);
    Ok((total, [latent, pixel, perceptual]))
}

/// `l4 |w_t - w_t_hat|_1 + l5 |I_t' - I_t_hat|^2 + l6 |F(.) - F(.)|^2 + l7 reg(basis)`.
pub fn target_loss(
    w_t: &Var,
    w_t_hat: &Var,
    image_ref: &Var,
    image_hat: &Var,
    features: &dyn PerceptualFeatures,
    basis: &PoseBasis,
    weights: &InjectionWeights,
) -> Result<(Var, [Var; 4])> {
    check_same("target codes", w_t, w_t_hat)?;
    check_same("target images", image_ref, image_hat)?;
    let latent = l1_per_sample(w_t, w_t_hat).scale(weights.lambda4);
    let pixel = l2sq_per_sample(image_ref, image_hat).scale(weights.lambda5);
    let fa = features.features(image_ref)?;
    let fb = features.features(image_hat)?;
    let perceptual = l2sq_per_sample(&fa, &fb).scale(weights.lambda6);
    let reg = basis.direction_penalty().scale(weights.lambda7);
    let total = latent.add(&pixel).add(&perceptual).add(&reg);
    Ok((total, [latent, pixel, perceptual, reg]))
}

/// Three renders of one identity: source, frontal and target views.
#[derive(Clone, Debug)]
pub struct ViewTriplet {
    pub source: Tensor,
    pub canonical: Tensor,
    pub target: Tensor,
    /// `(pitch, yaw)` radians.
    pub source_view: (f64, f64),
    pub target_view: (f64, f64),
    pub code: Option<ControlCode>,
}

impl ViewTriplet {
    pub fn canonical_view(&self) -> (f64, f64) {
        (0.0, 0.0)
    }
}

/// Pseudo ground-truth generator for injection training.
pub trait TripletSource {
    fn sample_triplet(&self, rng: &mut ChaCha8Rng) -> Result<ViewTriplet>;

    /// `n` triplets; sources may batch the rendering.
    fn sample_triplets(&self, rng: &mut ChaCha8Rng, n: usize) -> Result<Vec<ViewTriplet>> {
        (0..n).map(|_| self.sample_triplet(rng)).collect()
    }
}

/// Uniform draw from `[-pitch_range, pitch_range] x [-yaw_range, yaw_range]` (radians).
pub fn sample_view<R: Rng + ?Sized>(rng: &mut R, pitch_range: f64, yaw_range: f64) -> (f64, f64) {
    (
        rng.random_range(-pitch_range..=pitch_range),
        rng.random_range(-yaw_range..=yaw_range),
    )
}

/// Triplets rendered by a trained generator with one control code.
pub struct SurfTripletSource {
    pub generator: Arc<GeneratorState>,
    pub camera: CameraView,
    pub render: RenderOptions,
    pub resolution: usize,
    pub pitch_range: f64,
    pub yaw_range: f64,
}

impl TripletSource for SurfTripletSource {
    fn sample_triplet(&self, rng: &mut ChaCha8Rng) -> Result<ViewTriplet> {
        let code = ControlCode::sample(rng, &self.generator.config);
        let v_s = sample_view(rng, self.pitch_range, self.yaw_range);
        let v_t = sample_view(rng, self.pitch_range, self.yaw_range);
        let r = (self.resolution, self.resolution);
        // Deterministic depths: the three renders differ only in the camera.
        let render = |v: (f64, f64)| {
            render_image::<ChaCha8Rng>(&self.generator, &code, &self.camera.with_angles(v.0, v.1), r, &self.render, None)
        };
        Ok(ViewTriplet {
            source: render(v_s)?,
            canonical: render((0.0, 0.0))?,
            target: render(v_t)?,
            source_view: v_s,
            target_view: v_t,
            code: Some(code),
        })
    }
}

/// Mock generator living in the span of a linear decoder: the editable slice
/// of a view is `base + Q a + scale (pitch a_p + yaw a_y)` with identity
/// coefficients `a` and orthonormal `[Q | a_p | a_y]`. The exact canonical map
/// removes the `a_p, a_y` components of `slice - base`.
pub struct LinearPoseSource {
    pub decoder: Arc<dyn StyleDecoder>,
    pub template: LatentCode,
    pub base: Vec<f64>,
    /// `[slice, identity_dims]`
    pub identity_basis: Tensor,
    pub pitch_dir: Vec<f64>,
    pub yaw_dir: Vec<f64>,
    pub scale: f64,
    pub pitch_range: f64,
    pub yaw_range: f64,
}

impl LinearPoseSource {
    pub fn new(
        decoder: Arc<dyn StyleDecoder>,
        template: LatentCode,
        identity_dims: usize,
        scale: f64,
        pitch_range: f64,
        yaw_range: f64,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = template.slice_len();
        let cols = identity_dims + 2;
        let g = nn::normal(&mut rng, &[s, cols], 1.0);
        let q = DMatrix::from_row_slice(s, cols, g.data()).qr().q();
        let col = |j: usize| -> Vec<f64> { (0..s).map(|i| q[(i, j)]).collect() };
        let identity_basis = Tensor::from_fn(&[s, identity_dims], |i| q[(i / identity_dims, i % identity_dims)]);
        Self {
            decoder,
            base: template.editable_slice().to_vec(),
            template,
            identity_basis,
            pitch_dir: col(identity_dims),
            yaw_dir: col(identity_dims + 1),
            scale,
            pitch_range,
            yaw_range,
        }
    }

    fn slice_for(&self, a: &[f64], view: (f64, f64)) -> Vec<f64> {
        let k = a.len();
        (0..self.base.len())
            .map(|i| {
                let id: f64 = (0..k).map(|j| self.identity_basis.data()[i * k + j] * a[j]).sum();
                self.base[i] + id + self.scale * (view.0 * self.pitch_dir[i] + view.1 * self.yaw_dir[i])
            })
            .collect()
    }

    pub fn code_for(&self, a: &[f64], view: (f64, f64)) -> LatentCode {
        let mut c = self.template.clone();
        c.set_editable(&self.slice_for(a, view)).expect("slice length matches template");
        c
    }

    pub fn sample_identity<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.identity_basis.shape()[1]).map(|_| StandardNormal.sample(rng)).collect()
    }

    /// The exact frontalization of an editable slice.
    pub fn analytic_canonical(&self, slice: &[f64]) -> Vec<f64> {
        let dot = |d: &[f64]| -> f64 { slice.iter().zip(&self.base).zip(d).map(|((s, b), d)| (s - b) * d).sum() };
        let (cp, cy) = (dot(&self.pitch_dir), dot(&self.yaw_dir));
        slice
            .iter()
            .enumerate()
            .map(|(i, s)| s - cp * self.pitch_dir[i] - cy * self.yaw_dir[i])
            .collect()
    }
}

impl TripletSource for LinearPoseSource {
    fn sample_triplet(&self, rng: &mut ChaCha8Rng) -> Result<ViewTriplet> {
        Ok(self.sample_triplets(rng, 1)?.remove(0))
    }

    fn sample_triplets(&self, rng: &mut ChaCha8Rng, n: usize) -> Result<Vec<ViewTriplet>> {
        let mut views = Vec::with_capacity(n);
        let mut codes = Vec::with_capacity(3 * n);
        for _ in 0..n {
            let a = self.sample_identity(rng);
            let v_s = sample_view(rng, self.pitch_range, self.yaw_range);
            let v_t = sample_view(rng, self.pitch_range, self.yaw_range);
            codes.extend([v_s, (0.0, 0.0), v_t].map(|v| self.code_for(&a, v)));
            views.push((v_s, v_t));
        }
        let mut images = self.decoder.decode_codes(&codes)?.into_iter();
        Ok(views
            .into_iter()
            .map(|(v_s, v_t)| ViewTriplet {
                source: images.next().expect("three images per triplet"),
                canonical: images.next().expect("three images per triplet"),
                target: images.next().expect("three images per triplet"),
                source_view: v_s,
                target_view: v_t,
                code: None,
            })
            .collect())
    }
}

/// Frozen models used by the injection stage.
#[derive(Clone)]
pub struct InjectionBackends {
    pub encoder: Arc<dyn InversionEncoder>,
    pub decoder: Arc<dyn StyleDecoder>,
    pub perceptual: Arc<dyn PerceptualFeatures>,
}

impl InjectionBackends {
    fn fingerprints(&self) -> (u64, u64) {
        (self.encoder.fingerprint(), self.decoder.fingerprint())
    }

    fn encode_all(&self, images: &[&Tensor]) -> Result<Vec<LatentCode>> {
        let r = self.encoder.resolution();
        let sized: Vec<Tensor> = images
            .iter()
            .map(|im| {
                if im.shape()[0] == r && im.shape()[1] == r {
                    (*im).clone()
                } else {
                    resize_image(im, r)
                }
            })
            .collect();
        Ok(self.encoder.encode_batch(&sized)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InjectionStepReport {
    pub step: u64,
    pub parts: Vec<f64>,
    pub total: f64,
}

pub struct InjectionTrainer {
    pub config: InjectionConfig,
    pub model: InjectionModel,
    pub optimizer: Adam,
    pub step: u64,
    pub seed: u64,
    frozen: (u64, u64),
}

impl InjectionTrainer {
    pub fn new(config: &InjectionConfig, seed: u64, backends: &InjectionBackends) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = InjectionModel::new(config, &mut rng)?;
        let latent_layers = backends.decoder.layers();
        if latent_layers != config.layers || backends.encoder.layers() != config.layers {
            return Err(AdapterError::Shape {
                role: "decoder",
                got: vec![latent_layers],
                expected: vec![config.layers],
            }
            .into());
        }
        Ok(Self {
            config: config.clone(),
            model,
            optimizer: Adam::new(config.lr, 0.9, 0.999),
            step: 0,
            seed,
            frozen: backends.fingerprints(),
        })
    }

    fn step_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x1A7E_C710);
        rng.set_stream(self.step);
        rng
    }

    pub fn check_frozen(&self, backends: &InjectionBackends) -> Result<()> {
        let now = backends.fingerprints();
        if now.0 != self.frozen.0 {
            return Err(AdapterError::FrozenBackendMutated {
                role: "encoder",
                before: self.frozen.0,
                after: now.0,
            }
            .into());
        }
        if now.1 != self.frozen.1 {
            return Err(AdapterError::FrozenBackendMutated {
                role: "decoder",
                before: self.frozen.1,
                after: now.1,
            }
            .into());
        }
        Ok(())
    }

    /// Encodes a batch of triplets into `(w_s, w_c, w_t, target views)`.
    fn encode_batch(
        &self,
        source: &dyn TripletSource,
        backends: &InjectionBackends,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
        let b = self.config.batch_size;
        let triplets = source.sample_triplets(rng, b)?;
        let images: Vec<&Tensor> = triplets.iter().flat_map(|t| [&t.source, &t.canonical, &t.target]).collect();
        let codes = backends.encode_all(&images)?;
        let pick = |k: usize| -> Vec<LatentCode> { codes.iter().skip(k).step_by(3).cloned().collect() };
        let (ws, wc, wt) = (pick(0), pick(1), pick(2));
        let views = triplets.iter().flat_map(|t| [t.target_view.0, t.target_view.1]).collect();
        Ok((stack_codes(&ws)?, stack_codes(&wc)?, stack_codes(&wt)?, Tensor::new(&[b, 2], views)))
    }

    /// Loss of the current model on a batch; differentiable in the model.
    pub fn losses(
        &self,
        batch: &(Tensor, Tensor, Tensor, Tensor),
        backends: &InjectionBackends,
    ) -> Result<(Var, Vec<Var>)> {
        let e = self.config.editable;
        let (ws, wc, wt, views) = batch;
        let (ws, wc, wt) = (Var::constant(ws.clone()), Var::constant(wc.clone()), Var::constant(wt.clone()));
        let wc_hat = self.model.canonicalize_var(&ws, e)?;
        let wt_hat = self.model.apply_pose_var(&wc_hat, views, e)?;
        // One decoder call per side: large decoders cost about the same for 2B codes as for B.
        let n = ws.shape()[0];
        let (ic, it) = {
            let _g = no_grad();
            let both = backends.decoder.decode(&Var::concat(&[wc.clone(), wt.clone()], 0))?;
            (both.narrow(0, 0, n), both.narrow(0, n, n))
        };
        let hats = backends.decoder.decode(&Var::concat(&[wc_hat.clone(), wt_hat.clone()], 0))?;
        let (ic_hat, it_hat) = (hats.narrow(0, 0, n), hats.narrow(0, n, n));
        let w = &self.config.weights;
        let (lc, pc) = canonical_loss(&wc, &wc_hat, &ic, &ic_hat, backends.perceptual.as_ref(), w)?;
        let (lt, pt) = target_loss(&wt, &wt_hat, &it, &it_hat, backends.perceptual.as_ref(), &self.model.basis, w)?;
        let parts = pc.into_iter().chain(pt).collect();
        Ok((lc.add(&lt), parts))
    }

    pub fn train_step(&mut self, source: &dyn TripletSource, backends: &InjectionBackends) -> Result<InjectionStepReport> {
        let mut rng = self.step_rng();
        let batch = self.encode_batch(source, backends, &mut rng)?;
        let (total, parts) = self.losses(&batch, backends)?;
        let report = InjectionStepReport {
            step: self.step,
            parts: parts.iter().map(Var::item).collect(),
            total: total.item(),
        };
        if !report.total.is_finite() || report.parts.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric(format!(
                "injection loss became non-finite at step {}: {:?}",
                self.step, report.parts
            )));
        }
        let params = self.model.params();
        let refs: Vec<&Var> = params.iter().collect();
        let grads = backward(&total, &refs);
        self.optimizer.lr = self.config.lr_at(self.step);
        adam_step(&mut self.optimizer, &mut self.model, &grads);
        self.step += 1;
        if self.config.frozen_check_every > 0 && self.step % self.config.frozen_check_every == 0 {
            self.check_frozen(backends)?;
        }
        Ok(report)
    }

    /// Runs `steps` updates, then confirms the backends stayed frozen.
    pub fn train(
        &mut self,
        steps: u64,
        source: &dyn TripletSource,
        backends: &InjectionBackends,
        mut on_step: impl FnMut(&InjectionStepReport) -> Result<()>,
    ) -> Result<()> {
        for _ in 0..steps {
            let r = self.train_step(source, backends)?;
            on_step(&r)?;
        }
        self.check_frozen(backends)
    }

    pub fn to_checkpoint(&self, config_hash: &str) -> Checkpoint {
        let c = &self.config;
        let mut ck = Checkpoint::new(
            "injection",
            config_hash,
            serde_json::json!({
                "layers": c.layers, "width": c.width, "editable": c.editable,
                "mapper_hidden": c.mapper_hidden, "directions": c.directions,
                "step": self.step, "seed": self.seed,
            }),
        );
        ck.insert_all("model.", self.model.tensors());
        ck.insert_adam("opt.", &self.optimizer.state());
        ck
    }

    pub fn load_checkpoint(&mut self, ck: &Checkpoint, path: &Path) -> Result<()> {
        ck.expect_kind("injection", path)?;
        for key in ["layers", "width", "editable", "mapper_hidden", "directions"] {
            let want = match key {
                "layers" => self.config.layers,
                "width" => self.config.width,
                "editable" => self.config.editable,
                "mapper_hidden" => self.config.mapper_hidden,
                _ => self.config.directions,
            };
            if ck.meta_usize(key)? != want {
                return Err(Error::Checkpoint {
                    path: path.to_path_buf(),
                    reason: format!("`{key}` is {} in the checkpoint but {want} in the config", ck.meta_usize(key)?),
                });
            }
        }
        self.model.load_tensors(&ck.with_prefix("model."))?;
        self.optimizer.load_state(ck.adam("opt.")?);
        self.step = ck.meta_usize("step")? as u64;
        Ok(())
    }
}

/// Loads the mapper and basis from an injection checkpoint.
pub fn load_injection_model(ck: &Checkpoint, path: &Path) -> Result<(InjectionModel, usize)> {
    ck.expect_kind("injection", path)?;
    let cfg = InjectionConfig {
        layers: ck.meta_usize("layers")?,
        width: ck.meta_usize("width")?,
        editable: ck.meta_usize("editable")?,
        mapper_hidden: ck.meta_usize("mapper_hidden")?,
        directions: ck.meta_usize("directions")?,
        ..Default::default()
    };
    let mut model = InjectionModel::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    model.load_tensors(&ck.with_prefix("model."))?;
    Ok((model, cfg.editable))
}

/// `decode(apply_pose(canonicalize(w), view))`.
pub fn generate_3d(
    w: &LatentCode,
    view: (f64, f64),
    model: &InjectionModel,
    decoder: &dyn StyleDecoder,
) -> Result<Tensor> {
    let code = model.apply_pose(&model.canonicalize(w)?, view)?;
    Ok(decoder.decode_code(&code)?)
}

pub struct NovelView {
    pub image: Tensor,
    /// Encoder output before canonicalization.
    pub code: LatentCode,
}

/// Single-pass novel view of a real image: encode, then [`generate_3d`].
pub fn novel_view(
    image: &Tensor,
    view: (f64, f64),
    encoder: &dyn InversionEncoder,
    model: &InjectionModel,
    decoder: &dyn StyleDecoder,
) -> Result<NovelView> {
    let r = encoder.resolution();
    let img = if image.shape()[0] == r && image.shape()[1] == r {
        image.clone()
    } else {
        resize_image(image, r)
    };
    let code = encoder.encode(&img)?;
    let image = generate_3d(&code, view, model, decoder)?;
    Ok(NovelView { image, code })
}

/// `mean(with) - mean(without)` over full codes.
pub fn semantic_direction(with: &[LatentCode], without: &[LatentCode]) -> Result<Vec<f64>> {
    if with.is_empty() || without.is_empty() {
        return Err(Error::invalid("semantic direction needs at least one code on each side"));
    }
    let first = &with[0];
    if with.iter().chain(without).any(|c| !c.same_layout(first)) {
        return Err(Error::invalid("latent codes have different layouts"));
    }
    let mean = |codes: &[LatentCode]| -> Vec<f64> {
        let mut m = vec![0.0; first.values().len()];
        for c in codes {
            m.iter_mut().zip(c.values()).for_each(|(a, v)| *a += v);
        }
        m.iter_mut().for_each(|a| *a /= codes.len() as f64);
        m
    };
    let (a, b) = (mean(with), mean(without));
    Ok(a.iter().zip(&b).map(|(x, y)| x - y).collect())
}

/// `code + strength * direction`.
pub fn apply_direction(code: &LatentCode, direction: &[f64], strength: f64) -> Result<LatentCode> {
    if direction.len() != code.values().len() {
        return Err(Error::invalid(format!(
            "direction has {} values, code has {}",
            direction.len(),
            code.values().len()
        )));
    }
    if strength == 0.0 {
        return Ok(code.clone());
    }
    let v = code.values().iter().zip(direction).map(|(c, d)| c + strength * d).collect();
    LatentCode::new(code.layers(), code.width(), code.editable_layers(), v)
}

/// Sidecar metadata of a stored direction; values live in `blob` as
/// little-endian `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectionMeta {
    pub name: String,
    pub source_attribute: String,
    /// How `strength` scales the vector when applied.
    pub strength_convention: String,
    pub layers: usize,
    pub width: usize,
    pub len: usize,
    pub blob: String,
}

/// Writes `<dir>/<name>.toml` and `<dir>/<name>.bin`.
pub fn save_direction(dir: &Path, meta: &DirectionMeta, values: &[f64]) -> Result<PathBuf> {
    if values.len() != meta.len {
        return Err(Error::invalid("direction length disagrees with its metadata"));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bin = dir.join(&meta.blob);
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    let toml_path = dir.join(format!("{}.toml", meta.name));
    let text = toml::to_string(meta).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(&toml_path, text).map_err(|e| Error::io(&toml_path, e))?;
    Ok(toml_path)
}

pub fn load_direction(toml_path: &Path) -> Result<(DirectionMeta, Vec<f64>)> {
    let text = std::fs::read_to_string(toml_path).map_err(|e| Error::io(toml_path, e))?;
    let meta: DirectionMeta =
        toml::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", toml_path.display())))?;
    let bin = toml_path.parent().unwrap_or(Path::new(".")).join(&meta.blob);
    let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if bytes.len() != meta.len * 8 {
        return Err(Error::Data(format!(
            "{}: expected {} values, found {} bytes",
            bin.display(),
            meta.len,
            bytes.len()
        )));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((meta, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> InjectionConfig {
        InjectionConfig {
            layers: 6,
            width: 8,
            editable: 2,
            mapper_hidden: 16,
            directions: 3,
            ..Default::default()
        }
    }

    #[test]
    fn fresh_model_is_identity_on_codes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = small_cfg();
        let model = InjectionModel::new(&cfg, &mut rng).unwrap();
        let w = LatentCode::new(6, 8, 2, nn::normal(&mut rng, &[48], 1.0).into_vec()).unwrap();
        assert_eq!(model.canonicalize(&w).unwrap(), w);
        assert_eq!(model.apply_pose(&w, (0.0, 0.0)).unwrap(), w);
        assert_eq!(model.basis.direction_penalty().item(), 0.0);
    }

    #[test]
    fn pose_edit_touches_only_editable_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = InjectionModel::new(&small_cfg(), &mut rng).unwrap();
        let w = LatentCode::zeros(6, 8, 2);
        let out = model.apply_pose(&w, (0.3, -0.2)).unwrap();
        assert_eq!(&out.values()[16..], &w.values()[16..]);
        assert_ne!(out.editable_slice(), w.editable_slice());
    }

    #[test]
    fn layout_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = InjectionModel::new(&small_cfg(), &mut rng).unwrap();
        let w = LatentCode::zeros(6, 4, 2);
        assert!(model.canonicalize(&w).is_err());
        assert!(LatentCode::new(6, 8, 7, vec![0.0; 48]).is_err());
    }

    #[test]
    fn semantic_direction_cases() {
        let a = LatentCode::new(2, 1, 1, vec![1.0, 2.0]).unwrap();
        let b = LatentCode::new(2, 1, 1, vec![0.5, 4.0]).unwrap();
        assert_eq!(semantic_direction(&[a.clone()], &[a.clone()]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(semantic_direction(&[a.clone()], &[b.clone()]).unwrap(), vec![0.5, -2.0]);
        assert!(semantic_direction(&[], &[b.clone()]).is_err());
        assert_eq!(apply_direction(&b, &[1.0, 1.0], 0.0).unwrap(), b);
    }

    #[test]
    fn direction_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let meta = DirectionMeta {
            name: "smile".into(),
            source_attribute: "L3D2".into(),
            strength_convention: "code + strength * direction".into(),
            layers: 1,
            width: 3,
            len: 3,
            blob: "smile.bin".into(),
        };
        let p = save_direction(dir.path(), &meta, &[1.0, -0.5, 1e-300]).unwrap();
        let (m, v) = load_direction(&p).unwrap();
        assert_eq!(m, meta);
        assert_eq!(v, vec![1.0, -0.5, 1e-300]);
    }
}
