//! The subspace-modulated radiance-field generator.
//!
//! Each of the `t + 1` modulated layers owns a subspace `(U, D, mu)` that maps
//! its `K` control coefficients to a modulation vector `phi = U diag(D) z + mu`.
//! An affine head turns `phi` into FiLM frequencies and phases for a sine
//! layer with a skip connection. The first `t` layers form the shared trunk;
//! the last one is the view-conditioned color layer.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use surfgan_grad::{no_grad, Tensor, Var};

use crate::error::{Error, Result};
use crate::geometry::{
    composite, generate_rays, hierarchical_sample, stratified_sample, CameraView,
    CompositeOptions, RayBatch, SampleSet,
};
use crate::nn::{module_fields, Linear};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Sub-modulations per layer.
    pub k: usize,
    /// Shared trunk depth; the generator has `t + 1` modulated layers.
    pub t: usize,
    pub hidden: usize,
    pub mod_dim: usize,
    pub noise_dim: usize,
    pub freq_scale: f64,
    pub freq_offset: f64,
    /// Multiplies world coordinates before the input embedding.
    pub coord_scale: f64,
    /// Density is `softplus(raw - sigma_shift)`.
    pub sigma_shift: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            k: 6,
            t: 8,
            hidden: 256,
            mod_dim: 256,
            noise_dim: 256,
            freq_scale: 15.0,
            freq_offset: 30.0,
            coord_scale: 8.0,
            sigma_shift: 1.0,
        }
    }
}

impl GeneratorConfig {
    pub fn layers(&self) -> usize {
        self.t + 1
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("k", self.k),
            ("t", self.t),
            ("hidden", self.hidden),
            ("mod_dim", self.mod_dim),
            ("noise_dim", self.noise_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("generator.{name} must be positive")));
        }
        if self.k > self.mod_dim {
            return Err(Error::Config(format!(
                "generator.k = {} exceeds mod_dim = {}; the basis cannot be orthonormal",
                self.k, self.mod_dim
            )));
        }
        if !(self.coord_scale.is_finite() && self.freq_scale.is_finite() && self.freq_offset.is_finite())
        {
            return Err(Error::Config("generator scales must be finite".into()));
        }
        Ok(())
    }
}

/// One layer's learnable basis `U: [mod_dim, K]`, scales `D: [K]` and shift `mu`.
#[derive(Clone, Debug)]
pub struct SubspaceLayer {
    pub u: Var,
    pub d: Var,
    pub mu: Var,
}

module_fields!(SubspaceLayer { u, d, mu });

impl SubspaceLayer {
    pub fn new(u: Tensor, d: Tensor, mu: Tensor) -> Self {
        assert_eq!(u.shape()[1], d.numel());
        assert_eq!(u.shape()[0], mu.numel());
        Self {
            u: Var::param(u),
            d: Var::param(d),
            mu: Var::param(mu),
        }
    }

    pub fn k(&self) -> usize {
        self.d.numel()
    }

    pub fn mod_dim(&self) -> usize {
        self.mu.numel()
    }

    /// `phi = (z * D) U^T + mu` for a batch of coefficients `z: [B, K]`.
    pub fn modulate(&self, z: &Var) -> Var {
        Var::mm(&z.mul(&self.d), &self.u, false, true).add(&self.mu)
    }

    /// Single-code form with a length check.
    pub fn modulation(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.k() {
            return Err(Error::invalid(format!(
                "layer expects {} coefficients, got {}",
                self.k(),
                z.len()
            )));
        }
        let z = Var::constant(Tensor::new(&[1, z.len()], z.to_vec()));
        Ok(self.modulate(&z).value().to_vec())
    }

    /// `sum |U^T U - I|`.
    pub fn orthogonality(&self) -> Var {
        let k = self.k();
        let gram = Var::mm(&self.u, &self.u, true, false);
        gram.sub(&Var::constant(identity(k))).abs().sum()
    }
}

pub(crate) fn identity(n: usize) -> Tensor {
    Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
}

/// A `[rows, cols]` matrix with exactly orthonormal columns.
///
/// Columns are randomly signed columns of a Sylvester Hadamard matrix of size
/// `4^q`, scaled by `2^-q` and scattered onto a random subset of rows, so every
/// Gram entry is computed without rounding. Falls back to a signed partial
/// permutation when no such size fits.
pub fn orthonormal_columns<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    assert!(cols <= rows, "need cols <= rows for orthonormal columns");
    let mut n = 1usize;
    let mut scale = 1.0;
    while n * 4 <= rows {
        n *= 4;
        scale *= 0.5;
    }
    let mut out = vec![0.0; rows * cols];
    let mut row_ids: Vec<usize> = (0..rows).collect();
    row_ids.shuffle(rng);
    if n >= cols && n > 1 {
        let mut hadamard_cols: Vec<usize> = (0..n).collect();
        hadamard_cols.shuffle(rng);
        for (c, &hc) in hadamard_cols[..cols].iter().enumerate() {
            let sign = if rng.random::<bool>() { scale } else { -scale };
            for (r, &row) in row_ids[..n].iter().enumerate() {
                let entry = if (r & hc).count_ones() % 2 == 0 { sign } else { -sign };
                out[row * cols + c] = entry;
            }
        }
    } else {
        for c in 0..cols {
            out[row_ids[c] * cols + c] = if rng.random::<bool>() { 1.0 } else { -1.0 };
        }
    }
    Tensor::new(&[rows, cols], out)
}

/// One modulated sine layer: subspace, FiLM head and the linear map `W, b`.
#[derive(Clone, Debug)]
pub struct SurfLayer {
    pub subspace: SubspaceLayer,
    /// `mod_dim -> 2 * hidden`, frequencies first.
    pub film: Linear,
    pub linear: Linear,
}

module_fields!(SurfLayer { subspace, film, linear });

/// FiLM frequencies and phases, each `[B, hidden]`.
pub fn film_params(film: &Linear, phi: &Var, freq_scale: f64, freq_offset: f64) -> (Var, Var) {
    let h = film.out_dim() / 2;
    let raw = film.forward(phi);
    let gamma = raw.narrow(1, 0, h).scale(freq_scale).add_scalar(freq_offset);
    let beta = raw.narrow(1, h, h);
    (gamma, beta)
}

/// `sin(gamma * (x W + b) + beta)` on `x: [B, P, in]` with `gamma, beta: [B, H]`.
fn film_sine(x: &Var, gamma: &Var, beta: &Var, w: &Var, b: &Var) -> Var {
    let s = x.shape().to_vec();
    let (bsz, p, h) = (s[0], s[1], w.shape()[1]);
    let pre = x.reshape(&[bsz * p, s[2]]).matmul(w).add(b).reshape(&[bsz, p, h]);
    let g = gamma.reshape(&[bsz, 1, h]);
    let be = beta.reshape(&[bsz, 1, h]);
    pre.mul(&g).add(&be).sin()
}

/// `psi' = sin(gamma * (psi W + b) + beta) + psi`.
pub fn surf_block(psi: &Var, gamma: &Var, beta: &Var, w: &Var, b: &Var) -> Var {
    film_sine(psi, gamma, beta, w, b).add(psi)
}

/// Control coefficients `z` (one group of `K` per modulated layer) and noise `eps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlCode {
    pub z: Vec<Vec<f64>>,
    pub eps: Vec<f64>,
}

impl ControlCode {
    /// Standard normal draw.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, cfg: &GeneratorConfig) -> Self {
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(rng)).collect() };
        let z = (0..cfg.layers()).map(|_| draw(cfg.k)).collect();
        let eps = draw(cfg.noise_dim);
        Self { z, eps }
    }

    pub fn zeros(cfg: &GeneratorConfig) -> Self {
        Self {
            z: vec![vec![0.0; cfg.k]; cfg.layers()],
            eps: vec![0.0; cfg.noise_dim],
        }
    }

    pub fn validate(&self, cfg: &GeneratorConfig) -> Result<()> {
        if self.z.len() != cfg.layers() || self.z.iter().any(|g| g.len() != cfg.k) {
            return Err(Error::invalid(format!(
                "control code must have {} groups of {} coefficients",
                cfg.layers(),
                cfg.k
            )));
        }
        if self.eps.len() != cfg.noise_dim {
            return Err(Error::invalid(format!(
                "noise vector has length {}, expected {}",
                self.eps.len(),
                cfg.noise_dim
            )));
        }
        if self.z.iter().flatten().chain(&self.eps).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("control code contains non-finite values".into()));
        }
        Ok(())
    }
}

/// `LiDj`: layer `i`, basis `j`, both counted from 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ControlIndex {
    pub layer: usize,
    pub dim: usize,
}

impl fmt::Display for ControlIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}D{}", self.layer, self.dim)
    }
}

impl FromStr for ControlIndex {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("`{s}` is not of the form L<layer>D<dim>"));
        let rest = s.strip_prefix(['L', 'l']).ok_or_else(bad)?;
        let split = rest.find(['D', 'd']).ok_or_else(bad)?;
        let layer = rest[..split].parse().map_err(|_| bad())?;
        let dim = rest[split + 1..].parse().map_err(|_| bad())?;
        if layer == 0 || dim == 0 {
            return Err(bad());
        }
        Ok(Self { layer, dim })
    }
}

/// Copy of `code` with one coefficient replaced.
pub fn edit_control(code: &ControlCode, index: ControlIndex, value: f64) -> Result<ControlCode> {
    let group = index
        .layer
        .checked_sub(1)
        .and_then(|i| code.z.get(i))
        .ok_or_else(|| Error::invalid(format!("{index}: layer out of range 1..={}", code.z.len())))?;
    if index.dim == 0 || index.dim > group.len() {
        return Err(Error::invalid(format!(
            "{index}: basis out of range 1..={}",
            group.len()
        )));
    }
    let mut out = code.clone();
    out.z[index.layer - 1][index.dim - 1] = value;
    Ok(out)
}

/// Per-layer FiLM parameters for a batch of codes.
#[derive(Clone)]
pub struct Modulations {
    pub phis: Vec<Var>,
    pub gammas: Vec<Var>,
    pub betas: Vec<Var>,
    /// Noise contribution to the first feature, `[B, hidden]`.
    pub noise: Var,
}

impl Modulations {
    pub fn batch(&self) -> usize {
        self.noise.shape()[0]
    }

    fn select(&self, b: usize) -> Modulations {
        let pick = |v: &Var| v.narrow(0, b, 1);
        Modulations {
            phis: self.phis.iter().map(pick).collect(),
            gammas: self.gammas.iter().map(pick).collect(),
            betas: self.betas.iter().map(pick).collect(),
            noise: pick(&self.noise),
        }
    }
}

pub struct FieldOutput {
    /// `[B, P]`, non-negative.
    pub sigma: Var,
    /// `[B, P, 3]`, in `[0, 1]`.
    pub rgb: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderOptions {
    pub coarse_samples: usize,
    pub fine_samples: usize,
    pub composite: CompositeOptions,
    /// Rays evaluated at once when no gradient is recorded.
    pub chunk_rays: usize,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            coarse_samples: 12,
            fine_samples: 12,
            composite: CompositeOptions::default(),
            chunk_rays: 4096,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GeneratorState {
    pub config: GeneratorConfig,
    /// Coordinates to the first feature.
    pub embed: Linear,
    /// Noise to an additive first-feature offset.
    pub noise: Linear,
    /// `t` trunk layers followed by the color layer.
    pub layers: Vec<SurfLayer>,
    pub density: Linear,
    pub rgb: Linear,
}

module_fields!(GeneratorState { embed, noise, layers, density, rgb });

impl GeneratorState {
    pub fn new<R: Rng + ?Sized>(cfg: &GeneratorConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden;
        let siren = |n: usize| (6.0 / n as f64).sqrt() / 25.0;
        let embed = Linear::uniform(rng, 3, h, 1.0 / 3.0);
        let noise = Linear::uniform(rng, cfg.noise_dim, h, siren(cfg.noise_dim));
        let mut layers = Vec::with_capacity(cfg.layers());
        for i in 0..cfg.layers() {
            let fan_in = if i == cfg.t { h + 3 } else { h };
            let subspace = SubspaceLayer::new(
                orthonormal_columns(rng, cfg.mod_dim, cfg.k),
                Tensor::ones(&[cfg.k]),
                Tensor::zeros(&[cfg.mod_dim]),
            );
            let film_std = 0.25 * (2.0 / cfg.mod_dim as f64).sqrt();
            layers.push(SurfLayer {
                subspace,
                film: Linear::normal(rng, cfg.mod_dim, 2 * h, film_std),
                linear: Linear::uniform(rng, fan_in, h, siren(fan_in)),
            });
        }
        Ok(Self {
            config: cfg.clone(),
            embed,
            noise,
            layers,
            density: Linear::uniform(rng, h, 1, siren(h)),
            rgb: Linear::uniform(rng, h, 3, siren(h)),
        })
    }

    pub fn modulations(&self, codes: &[ControlCode]) -> Result<Modulations> {
        let cfg = &self.config;
        if codes.is_empty() {
            return Err(Error::invalid("at least one control code is required"));
        }
        for c in codes {
            c.validate(cfg)?;
        }
        let b = codes.len();
        let mut phis = Vec::with_capacity(cfg.layers());
        let mut gammas = Vec::with_capacity(cfg.layers());
        let mut betas = Vec::with_capacity(cfg.layers());
        for (i, layer) in self.layers.iter().enumerate() {
            let z: Vec<f64> = codes.iter().flat_map(|c| c.z[i].iter().copied()).collect();
            let phi = layer.subspace.modulate(&Var::constant(Tensor::new(&[b, cfg.k], z)));
            let (g, be) = film_params(&layer.film, &phi, cfg.freq_scale, cfg.freq_offset);
            phis.push(phi);
            gammas.push(g);
            betas.push(be);
        }
        let eps: Vec<f64> = codes.iter().flat_map(|c| c.eps.iter().copied()).collect();
        let noise = self
            .noise
            .forward(&Var::constant(Tensor::new(&[b, cfg.noise_dim], eps)));
        Ok(Modulations {
            phis,
            gammas,
            betas,
            noise,
        })
    }

    /// Density and color at `positions: [B, P, 3]` seen along `dirs: [B, P, 3]`.
    pub fn field(&self, m: &Modulations, positions: &Var, dirs: &Var) -> FieldOutput {
        let cfg = &self.config;
        let s = positions.shape();
        let (b, p, h) = (s[0], s[1], cfg.hidden);
        let mut psi = self
            .embed
            .forward(&positions.scale(cfg.coord_scale))
            .add(&m.noise.reshape(&[b, 1, h]));
        for i in 0..cfg.t {
            let l = &self.layers[i].linear;
            psi = surf_block(&psi, &m.gammas[i], &m.betas[i], &l.weight, &l.bias);
        }
        let sigma = self
            .density
            .forward(&psi)
            .add_scalar(-cfg.sigma_shift)
            .softplus()
            .reshape(&[b, p]);
        let color_in = Var::concat(&[psi.clone(), dirs.clone()], 2);
        let l = &self.layers[cfg.t].linear;
        let feat = film_sine(&color_in, &m.gammas[cfg.t], &m.betas[cfg.t], &l.weight, &l.bias).add(&psi);
        let rgb = self.rgb.forward(&feat).sigmoid();
        FieldOutput { sigma, rgb }
    }

    /// Composites the field at fixed `depths: [B, rays, S]`. Differentiable in
    /// the parameters; the depths are treated as constants.
    pub fn render_at_depths(
        &self,
        m: &Modulations,
        rays: &[RayBatch],
        depths: &Tensor,
        opts: &CompositeOptions,
    ) -> Result<Var> {
        let (b, r, s) = (depths.shape()[0], depths.shape()[1], depths.shape()[2]);
        if rays.len() != b || rays.iter().any(|rb| rb.len() != r) {
            return Err(Error::invalid("ray batches do not match the depth tensor"));
        }
        let (near, far) = (rays[0].near, rays[0].far);
        let mut pos = Vec::with_capacity(b * r * s * 3);
        let mut dir = Vec::with_capacity(b * r * s * 3);
        for (bi, rb) in rays.iter().enumerate() {
            let d = &depths.data()[bi * r * s..(bi + 1) * r * s];
            for ri in 0..r {
                let (o, v) = (rb.origins[ri], rb.directions[ri]);
                for k in 0..s {
                    let t = d[ri * s + k];
                    pos.extend_from_slice(&[o.x + t * v.x, o.y + t * v.y, o.z + t * v.z]);
                    dir.extend_from_slice(&[v.x, v.y, v.z]);
                }
            }
        }
        let positions = Var::constant(Tensor::new(&[b, r * s, 3], pos));
        let dirs = Var::constant(Tensor::new(&[b, r * s, 3], dir));
        let out = self.field(m, &positions, &dirs);
        let flat = depths.reshape(&[b * r, s]);
        let c = composite(
            &out.rgb.reshape(&[b * r, s, 3]),
            &out.sigma.reshape(&[b * r, s]),
            &flat,
            near,
            far,
            opts,
        )?;
        Ok(c.rgb.reshape(&[b, r, 3]))
    }

    /// Coarse compositing weights (no gradient) followed by hierarchical
    /// resampling; returns the merged sorted depths `[B, rays, coarse + fine]`.
    pub fn sample_depths<R: Rng + ?Sized>(
        &self,
        m: &Modulations,
        rays: &[RayBatch],
        opts: &RenderOptions,
        mut rng: Option<&mut R>,
    ) -> Result<Tensor> {
        let _guard = no_grad();
        let mut all = Vec::new();
        let mut per_ray = 0;
        for (bi, rb) in rays.iter().enumerate() {
            let coarse = stratified_sample(rb, opts.coarse_samples, rng.as_deref_mut())?;
            if opts.fine_samples == 0 {
                per_ray = coarse.per_ray;
                all.extend(coarse.depths);
                continue;
            }
            let mb = m.select(bi);
            let mut weights = Vec::with_capacity(coarse.depths.len());
            let chunk = opts.chunk_rays.max(1);
            for start in (0..rb.len()).step_by(chunk) {
                let n = chunk.min(rb.len() - start);
                let sub = slice_rays(rb, start, n);
                let d = Tensor::new(
                    &[1, n, coarse.per_ray],
                    coarse.depths[start * coarse.per_ray..(start + n) * coarse.per_ray].to_vec(),
                );
                weights.extend(self.coarse_weights(&mb, &sub, &d, &opts.composite)?);
            }
            let fine = hierarchical_sample(rb, &coarse, &weights, opts.fine_samples, rng.as_deref_mut())?;
            per_ray = fine.per_ray;
            all.extend(fine.depths);
        }
        Ok(Tensor::new(&[rays.len(), rays[0].len(), per_ray], all))
    }

    fn coarse_weights(
        &self,
        m: &Modulations,
        rays: &RayBatch,
        depths: &Tensor,
        opts: &CompositeOptions,
    ) -> Result<Vec<f64>> {
        let (r, s) = (depths.shape()[1], depths.shape()[2]);
        let samples = SampleSet {
            depths: depths.to_vec(),
            per_ray: s,
        };
        let pos: Vec<f64> = samples
            .positions(rays)
            .iter()
            .flat_map(|p| [p.x, p.y, p.z])
            .collect();
        let dir: Vec<f64> = (0..r * s)
            .flat_map(|i| {
                let v = rays.directions[i / s];
                [v.x, v.y, v.z]
            })
            .collect();
        let out = self.field(
            m,
            &Var::constant(Tensor::new(&[1, r * s, 3], pos)),
            &Var::constant(Tensor::new(&[1, r * s, 3], dir)),
        );
        let c = composite(
            &out.rgb.reshape(&[r, s, 3]),
            &out.sigma.reshape(&[r, s]),
            &depths.reshape(&[r, s]),
            rays.near,
            rays.far,
            opts,
        )?;
        Ok(c.weights.value().to_vec())
    }

    /// Renders one image per `(code, view)` pair as `[B, h, w, 3]`.
    ///
    /// `rng` jitters the coarse depths and drives the fine draws; without it
    /// both are deterministic.
    pub fn render<R: Rng + ?Sized>(
        &self,
        codes: &[ControlCode],
        views: &[CameraView],
        resolution: (usize, usize),
        opts: &RenderOptions,
        mut rng: Option<&mut R>,
    ) -> Result<Var> {
        if codes.len() != views.len() {
            return Err(Error::invalid(format!(
                "{} codes for {} views",
                codes.len(),
                views.len()
            )));
        }
        let (h, w) = resolution;
        let rays = views
            .iter()
            .map(|v| generate_rays(v, h, w))
            .collect::<Result<Vec<_>>>()?;
        let m = self.modulations(codes)?;
        let depths = self.sample_depths(&m, &rays, opts, rng.as_deref_mut())?;
        let img = if surfgan_grad::is_grad_enabled() {
            self.render_at_depths(&m, &rays, &depths, &opts.composite)?
        } else {
            self.render_chunked(&m, &rays, &depths, opts)?
        };
        Ok(img.reshape(&[codes.len(), h, w, 3]))
    }

    fn render_chunked(
        &self,
        m: &Modulations,
        rays: &[RayBatch],
        depths: &Tensor,
        opts: &RenderOptions,
    ) -> Result<Var> {
        let (r, s) = (depths.shape()[1], depths.shape()[2]);
        let chunk = opts.chunk_rays.max(1);
        let mut out = Vec::with_capacity(rays.len() * r * 3);
        for (bi, rb) in rays.iter().enumerate() {
            let mb = m.select(bi);
            for start in (0..r).step_by(chunk) {
                let n = chunk.min(r - start);
                let off = (bi * r + start) * s;
                let d = Tensor::new(&[1, n, s], depths.data()[off..off + n * s].to_vec());
                let img = self.render_at_depths(&mb, &[slice_rays(rb, start, n)], &d, &opts.composite)?;
                out.extend_from_slice(img.value().data());
            }
        }
        Ok(Var::constant(Tensor::new(&[rays.len(), r, 3], out)))
    }

    /// Mean over layers of `sum |U^T U - I|`.
    pub fn orthogonality_penalty(&self) -> Var {
        let terms: Vec<Var> = self
            .layers
            .iter()
            .map(|l| l.subspace.orthogonality().reshape(&[1]))
            .collect();
        Var::concat(&terms, 0).mean()
    }
}

fn slice_rays(rb: &RayBatch, start: usize, n: usize) -> RayBatch {
    RayBatch {
        origins: rb.origins[start..start + n].to_vec(),
        directions: rb.directions[start..start + n].to_vec(),
        height: 1,
        width: n,
        near: rb.near,
        far: rb.far,
    }
}

/// Convenience for callers that only need pixel values.
pub fn render_image<R: Rng + ?Sized>(
    state: &GeneratorState,
    code: &ControlCode,
    view: &CameraView,
    resolution: (usize, usize),
    opts: &RenderOptions,
    rng: Option<&mut R>,
) -> Result<Tensor> {
    let _guard = no_grad();
    let img = state.render(
        std::slice::from_ref(code),
        std::slice::from_ref(view),
        resolution,
        opts,
        rng,
    )?;
    let (h, w) = resolution;
    let t = img.value().reshape(&[h, w, 3]);
    if !t.all_finite() {
        return Err(Error::Numeric("rendered image contains non-finite pixels".into()));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Module;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            k: 3,
            t: 2,
            hidden: 8,
            mod_dim: 16,
            noise_dim: 4,
            ..Default::default()
        }
    }

    #[test]
    fn hadamard_init_is_exactly_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (rows, cols) in [(256, 6), (16, 3), (8, 6), (5, 5), (70, 10)] {
            let u = orthonormal_columns(&mut rng, rows, cols);
            let layer = SubspaceLayer::new(u, Tensor::ones(&[cols]), Tensor::zeros(&[rows]));
            assert_eq!(layer.orthogonality().item(), 0.0, "{rows}x{cols}");
        }
    }

    #[test]
    fn control_index_parses_one_based() {
        let idx: ControlIndex = "L3D2".parse().unwrap();
        assert_eq!(idx, ControlIndex { layer: 3, dim: 2 });
        assert_eq!(idx.to_string(), "L3D2");
        assert!("L0D1".parse::<ControlIndex>().is_err());
        assert!("X3D2".parse::<ControlIndex>().is_err());
    }

    #[test]
    fn edit_control_checks_range() {
        let cfg = small();
        let code = ControlCode::zeros(&cfg);
        let edited = edit_control(&code, ControlIndex { layer: 3, dim: 3 }, 1.5).unwrap();
        assert_eq!(edited.z[2][2], 1.5);
        assert!(edit_control(&code, ControlIndex { layer: 4, dim: 1 }, 0.0).is_err());
        assert!(edit_control(&code, ControlIndex { layer: 1, dim: 4 }, 0.0).is_err());
    }

    #[test]
    fn parameter_names_are_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = GeneratorState::new(&small(), &mut rng).unwrap();
        let names: Vec<_> = g.named_params().into_iter().map(|(n, _)| n).collect();
        assert!(names.contains(&"layers.2.subspace.u".to_string()));
        assert!(names.contains(&"rgb.bias".to_string()));
        assert_eq!(g.layers[2].linear.in_dim(), 8 + 3);
    }

    #[test]
    fn code_validation() {
        let cfg = small();
        let mut code = ControlCode::zeros(&cfg);
        code.eps.pop();
        assert!(code.validate(&cfg).is_err());
        let mut code = ControlCode::zeros(&cfg);
        code.z[0][0] = f64::NAN;
        assert!(code.validate(&cfg).is_err());
    }

    #[test]
    fn chunked_and_batched_renders_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = small();
        let g = GeneratorState::new(&cfg, &mut rng).unwrap();
        let code = ControlCode::sample(&mut rng, &cfg);
        let view = CameraView::new(0.1, -0.2);
        let opts = RenderOptions {
            coarse_samples: 4,
            fine_samples: 4,
            chunk_rays: 5,
            ..Default::default()
        };
        let none: Option<&mut ChaCha8Rng> = None;
        let a = render_image(&g, &code, &view, (4, 4), &opts, none).unwrap();
        let b = g
            .render::<ChaCha8Rng>(&[code], &[view], (4, 4), &opts, None)
            .unwrap();
        assert!(a.max_abs_diff(&b.value().reshape(&[4, 4, 3])) < 1e-12);
    }
}
