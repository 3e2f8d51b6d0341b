//! Interfaces to pretrained models, deterministic mocks, and a registry that
//! builds them from configuration.
//!
//! Real backends are plugins: register a constructor under a backend name and
//! reference it from the `[adapters]` table of a run config.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use surfgan_grad::{Tensor, Var};

use crate::data::{resize_image, sphere_pose_from_image};
use crate::error::AdapterError;
use crate::injection::LatentCode;
use crate::nn::{self, fingerprint_tensors};

pub type AdapterResult<T> = std::result::Result<T, AdapterError>;

/// Identification shared by every backend.
pub trait Adapter {
    fn backend(&self) -> &str;

    /// Changes whenever the backend's weights change.
    fn fingerprint(&self) -> u64;
}

/// Image to latent code.
pub trait InversionEncoder: Adapter {
    fn layers(&self) -> usize;
    /// Input resolution; callers resize to it.
    fn resolution(&self) -> usize;
    /// The latent the encoder's residuals are added to, when exposed.
    fn mean_latent(&self) -> Option<&LatentCode> {
        None
    }
    fn encode(&self, image: &Tensor) -> AdapterResult<LatentCode>;

    /// Encodes several images; backends may batch the work.
    fn encode_batch(&self, images: &[Tensor]) -> AdapterResult<Vec<LatentCode>> {
        images.iter().map(|im| self.encode(im)).collect()
    }
}

/// Latent code to image. Differentiable in the code.
pub trait StyleDecoder: Adapter {
    fn layers(&self) -> usize;
    fn resolution(&self) -> usize;
    /// `codes: [B, layers, width]` to images `[B, r, r, 3]`.
    fn decode(&self, codes: &Var) -> AdapterResult<Var>;

    fn decode_code(&self, code: &LatentCode) -> AdapterResult<Tensor> {
        let r = self.resolution();
        let v = self.decode(&Var::constant(code.to_tensor().reshape(&[1, code.layers(), code.width()])))?;
        Ok(v.value().reshape(&[r, r, 3]))
    }

    /// Decodes several codes in one batch.
    fn decode_codes(&self, codes: &[LatentCode]) -> AdapterResult<Vec<Tensor>> {
        let Some(first) = codes.first() else {
            return Ok(Vec::new());
        };
        let (l, w, r) = (first.layers(), first.width(), self.resolution());
        let data = codes.iter().flat_map(|c| c.values().iter().copied()).collect();
        let v = self.decode(&Var::constant(Tensor::new(&[codes.len(), l, w], data)))?;
        let per = r * r * 3;
        Ok((0..codes.len())
            .map(|i| Tensor::new(&[r, r, 3], v.value().data()[i * per..(i + 1) * per].to_vec()))
            .collect())
    }
}

/// Perceptual feature extractor. Differentiable in the images.
pub trait PerceptualFeatures: Adapter {
    /// `[B, r, r, 3]` to `[B, F]`.
    fn features(&self, images: &Var) -> AdapterResult<Var>;
}

pub trait IdentityEmbedder: Adapter {
    /// Unit-norm embedding.
    fn embed(&self, image: &Tensor) -> AdapterResult<Vec<f64>>;
}

pub trait PoseEstimator: Adapter {
    /// `(pitch, yaw)` in radians.
    fn estimate(&self, image: &Tensor) -> AdapterResult<(f64, f64)>;
}

/// Per-image features for Fréchet distances.
pub trait FeatureExtractor: Adapter {
    fn extract(&self, image: &Tensor) -> AdapterResult<Vec<f64>>;
}

fn check_image(role: &'static str, image: &Tensor, resolution: Option<usize>) -> AdapterResult<()> {
    let s = image.shape();
    let ok = s.len() == 3 && s[2] == 3 && resolution.is_none_or(|r| s[0] == r && s[1] == r);
    if ok {
        Ok(())
    } else {
        let r = resolution.unwrap_or(0);
        Err(AdapterError::Shape {
            role,
            got: s.to_vec(),
            expected: vec![r, r, 3],
        })
    }
}

/// Shared parameters of the linear mock latent space.
///
/// The decoder maps the flattened editable slice `s` to `s M + bias`, where
/// `M: [slice, pixels]` has orthonormal rows, and ignores the other layers.
/// The encoder applies the exact left inverse `(x - bias) M^T` and fills the
/// remaining layers from the mean latent, so `encode(decode(w))` returns the
/// editable slice of `w`.
#[derive(Debug)]
pub struct LinearMockSpace {
    pub seed: u64,
    pub layers: usize,
    pub width: usize,
    pub editable: usize,
    pub resolution: usize,
    /// `[editable * width, 3 * resolution^2]`
    pub matrix: Tensor,
    pub bias: Tensor,
    pub mean_latent: LatentCode,
}

const BLOCK: usize = 32;

fn random_orthogonal(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let g = nn::normal(rng, &[n, n], 1.0);
    let qr = DMatrix::from_row_slice(n, n, g.data()).qr();
    let (q, r) = (qr.q(), qr.r());
    // Sign fix makes the draw uniform over the orthogonal group.
    let signs = DMatrix::from_diagonal(&r.diagonal().map(|v| if v < 0.0 { -1.0 } else { 1.0 }));
    q * signs
}

impl LinearMockSpace {
    pub fn new(seed: u64, layers: usize, width: usize, editable: usize, resolution: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slice = editable * width;
        let pixels = 3 * resolution * resolution;
        assert!(slice <= pixels, "mock image must have at least as many pixels as slice entries");
        // Q = B2 * Pi * B1 with block-diagonal random orthogonal B1, B2 (a
        // trailing partial block is the identity) and a random permutation Pi.
        let blocks = pixels / BLOCK;
        let b1: Vec<DMatrix<f64>> = (0..blocks).map(|_| random_orthogonal(&mut rng, BLOCK)).collect();
        let b2: Vec<DMatrix<f64>> = (0..blocks).map(|_| random_orthogonal(&mut rng, BLOCK)).collect();
        let mut perm: Vec<usize> = (0..pixels).collect();
        perm.shuffle(&mut rng);
        let mut rows: Vec<usize> = (0..pixels).collect();
        rows.shuffle(&mut rng);
        let block_entry = |bs: &[DMatrix<f64>], i: usize, j: usize| -> f64 {
            if i / BLOCK != j / BLOCK {
                0.0
            } else if i / BLOCK >= blocks {
                (i == j) as u8 as f64
            } else {
                bs[i / BLOCK][(i % BLOCK, j % BLOCK)]
            }
        };
        let mut m = vec![0.0; slice * pixels];
        for (s, &i) in rows[..slice].iter().enumerate() {
            let start = (i / BLOCK) * BLOCK;
            for k in start..(start + BLOCK).min(pixels) {
                let c2 = block_entry(&b2, i, k);
                let src = perm[k];
                let s1 = (src / BLOCK) * BLOCK;
                for j in s1..(s1 + BLOCK).min(pixels) {
                    m[s * pixels + j] += c2 * block_entry(&b1, src, j);
                }
            }
        }
        let bias = Tensor::from_fn(&[pixels], |_| 0.5);
        let bias = bias.zip_with(&nn::uniform(&mut rng, &[pixels], 0.1), |a, b| a + b);
        let mean_latent = LatentCode::new(layers, width, editable, nn::normal(&mut rng, &[layers * width], 1.0).into_vec())
            .expect("mean latent dimensions are consistent");
        Self {
            seed,
            layers,
            width,
            editable,
            resolution,
            matrix: Tensor::new(&[slice, pixels], m),
            bias,
            mean_latent,
        }
    }

    fn fingerprint(&self) -> u64 {
        fingerprint_tensors([("matrix", &self.matrix), ("bias", &self.bias), ("mean", self.mean_latent.tensor_ref())])
    }
}

#[derive(Clone, Debug)]
pub struct MockDecoder {
    pub space: Arc<LinearMockSpace>,
}

#[derive(Clone, Debug)]
pub struct MockEncoder {
    pub space: Arc<LinearMockSpace>,
}

/// Decoder and encoder sharing one mock latent space.
pub fn mock_pair(seed: u64, layers: usize, width: usize, editable: usize, resolution: usize) -> (MockEncoder, MockDecoder) {
    let space = Arc::new(LinearMockSpace::new(seed, layers, width, editable, resolution));
    (MockEncoder { space: space.clone() }, MockDecoder { space })
}

impl Adapter for MockDecoder {
    fn backend(&self) -> &str {
        "mock"
    }

    fn fingerprint(&self) -> u64 {
        self.space.fingerprint()
    }
}

impl StyleDecoder for MockDecoder {
    fn layers(&self) -> usize {
        self.space.layers
    }

    fn resolution(&self) -> usize {
        self.space.resolution
    }

    fn decode(&self, codes: &Var) -> AdapterResult<Var> {
        let sp = &self.space;
        let s = codes.shape();
        if s.len() != 3 || s[1] != sp.layers || s[2] != sp.width {
            return Err(AdapterError::Shape {
                role: "decoder",
                got: s.to_vec(),
                expected: vec![s.first().copied().unwrap_or(0), sp.layers, sp.width],
            });
        }
        let b = s[0];
        let slice = codes.narrow(1, 0, sp.editable).reshape(&[b, sp.editable * sp.width]);
        let img = slice
            .matmul(&Var::constant(sp.matrix.clone()))
            .add(&Var::constant(sp.bias.clone()));
        Ok(img.reshape(&[b, sp.resolution, sp.resolution, 3]))
    }
}

impl Adapter for MockEncoder {
    fn backend(&self) -> &str {
        "mock"
    }

    fn fingerprint(&self) -> u64 {
        self.space.fingerprint()
    }
}

impl InversionEncoder for MockEncoder {
    fn layers(&self) -> usize {
        self.space.layers
    }

    fn resolution(&self) -> usize {
        self.space.resolution
    }

    fn mean_latent(&self) -> Option<&LatentCode> {
        Some(&self.space.mean_latent)
    }

    fn encode(&self, image: &Tensor) -> AdapterResult<LatentCode> {
        Ok(self.encode_batch(std::slice::from_ref(image))?.remove(0))
    }

    fn encode_batch(&self, images: &[Tensor]) -> AdapterResult<Vec<LatentCode>> {
        let sp = &self.space;
        for im in images {
            check_image("encoder", im, Some(sp.resolution))?;
        }
        let (n, pixels) = (images.len(), sp.matrix.shape()[1]);
        let data = images.iter().flat_map(|im| im.data().iter().copied()).collect();
        let centered = Tensor::new(&[n, pixels], data).zip_with(&sp.bias, |x, b| x - b);
        let slices = Tensor::matmul(&centered, &sp.matrix, false, true);
        let k = slices.shape()[1];
        (0..n)
            .map(|i| {
                let mut code = sp.mean_latent.clone();
                code.set_editable(&slices.data()[i * k..(i + 1) * k]).map_err(|e| AdapterError::Backend {
                    role: "encoder",
                    backend: "mock".into(),
                    reason: e.to_string(),
                })?;
                Ok(code)
            })
            .collect()
    }
}

/// Features are the flattened pixels, so the perceptual term equals the pixel term.
#[derive(Clone, Debug, Default)]
pub struct IdentityFeatures;

impl Adapter for IdentityFeatures {
    fn backend(&self) -> &str {
        "mock"
    }

    fn fingerprint(&self) -> u64 {
        0
    }
}

impl PerceptualFeatures for IdentityFeatures {
    fn features(&self, images: &Var) -> AdapterResult<Var> {
        let s = images.shape();
        if s.len() != 4 {
            return Err(AdapterError::Shape {
                role: "perceptual",
                got: s.to_vec(),
                expected: vec![0, 0, 0, 3],
            });
        }
        Ok(images.reshape(&[s[0], s[1] * s[2] * s[3]]))
    }
}

/// Fixed random projection of the image resized to `input_resolution`.
#[derive(Clone, Debug)]
pub struct RandomProjection {
    pub input_resolution: usize,
    /// `[3 * input_resolution^2, dim]`
    pub projection: Tensor,
    pub normalize: bool,
}

impl RandomProjection {
    pub fn new(seed: u64, input_resolution: usize, dim: usize, normalize: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 3 * input_resolution * input_resolution;
        Self {
            input_resolution,
            projection: nn::normal(&mut rng, &[n, dim], 1.0 / (n as f64).sqrt()),
            normalize,
        }
    }

    fn project(&self, role: &'static str, image: &Tensor) -> AdapterResult<Vec<f64>> {
        check_image(role, image, None)?;
        let small = if image.shape()[0] == self.input_resolution && image.shape()[1] == self.input_resolution {
            image.clone()
        } else {
            resize_image(image, self.input_resolution)
        };
        let n = small.numel();
        let centered = small.reshape(&[1, n]).map(|v| v - 0.5);
        let mut f = Tensor::matmul(&centered, &self.projection, false, false).into_vec();
        if self.normalize {
            let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(AdapterError::Backend {
                    role,
                    backend: "mock".into(),
                    reason: "image projects to the zero vector".into(),
                });
            }
            f.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(f)
    }
}

impl Adapter for RandomProjection {
    fn backend(&self) -> &str {
        "mock"
    }

    fn fingerprint(&self) -> u64 {
        fingerprint_tensors([("projection", &self.projection)])
    }
}

impl IdentityEmbedder for RandomProjection {
    fn embed(&self, image: &Tensor) -> AdapterResult<Vec<f64>> {
        let mut f = self.project("identity", image)?;
        if !self.normalize {
            let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            f.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(f)
    }
}

impl FeatureExtractor for RandomProjection {
    fn extract(&self, image: &Tensor) -> AdapterResult<Vec<f64>> {
        self.project("features", image)
    }
}

/// Reads the pose of a normal-shaded sphere from its center pixels.
#[derive(Clone, Debug, Default)]
pub struct SpherePoseEstimator;

impl Adapter for SpherePoseEstimator {
    fn backend(&self) -> &str {
        "mock"
    }

    fn fingerprint(&self) -> u64 {
        0
    }
}

impl PoseEstimator for SpherePoseEstimator {
    fn estimate(&self, image: &Tensor) -> AdapterResult<(f64, f64)> {
        check_image("pose-estimator", image, None)?;
        sphere_pose_from_image(image).ok_or_else(|| AdapterError::Backend {
            role: "pose-estimator",
            backend: "mock".into(),
            reason: "image center is background".into(),
        })
    }
}

/// One registry entry: a backend name plus its weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSpec {
    pub backend: String,
    #[serde(default)]
    pub weights: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for AdapterSpec {
    fn default() -> Self {
        Self {
            backend: "mock".into(),
            weights: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub encoder: AdapterSpec,
    pub decoder: AdapterSpec,
    pub perceptual: AdapterSpec,
    pub identity: AdapterSpec,
    pub pose_estimator: AdapterSpec,
    pub features: AdapterSpec,
}

/// Latent layout handed to constructors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatentLayout {
    pub layers: usize,
    pub width: usize,
    pub editable: usize,
    pub resolution: usize,
}

pub struct Backends {
    pub encoder: Arc<dyn InversionEncoder>,
    pub decoder: Arc<dyn StyleDecoder>,
    pub perceptual: Arc<dyn PerceptualFeatures>,
    pub identity: Arc<dyn IdentityEmbedder>,
    pub pose_estimator: Arc<dyn PoseEstimator>,
    pub features: Arc<dyn FeatureExtractor>,
}

type PairCtor = Box<dyn Fn(&AdapterSpec, &AdapterSpec, LatentLayout) -> AdapterResult<(Arc<dyn InversionEncoder>, Arc<dyn StyleDecoder>)>>;
type Ctor<T> = Box<dyn Fn(&AdapterSpec) -> AdapterResult<Arc<T>>>;

/// Constructors by backend name. Encoder and decoder are built together so
/// that paired backends can share state.
pub struct AdapterRegistry {
    latent: HashMap<String, PairCtor>,
    perceptual: HashMap<String, Ctor<dyn PerceptualFeatures>>,
    identity: HashMap<String, Ctor<dyn IdentityEmbedder>>,
    pose: HashMap<String, Ctor<dyn PoseEstimator>>,
    features: HashMap<String, Ctor<dyn FeatureExtractor>>,
}

impl Default for AdapterRegistry {
    fn default() -> Self {
        Self::with_mocks()
    }
}

fn lookup<'a, T>(map: &'a HashMap<String, T>, role: &'static str, backend: &str) -> AdapterResult<&'a T> {
    map.get(backend).ok_or_else(|| AdapterError::UnknownBackend {
        role,
        backend: backend.to_string(),
    })
}

impl AdapterRegistry {
    pub fn empty() -> Self {
        Self {
            latent: HashMap::new(),
            perceptual: HashMap::new(),
            identity: HashMap::new(),
            pose: HashMap::new(),
            features: HashMap::new(),
        }
    }

    pub fn with_mocks() -> Self {
        let mut r = Self::empty();
        r.register_latent("mock", |enc, _dec, layout| {
            let (e, d) = mock_pair(enc.seed, layout.layers, layout.width, layout.editable, layout.resolution);
            Ok((Arc::new(e) as Arc<dyn InversionEncoder>, Arc::new(d) as Arc<dyn StyleDecoder>))
        });
        r.register_perceptual("mock", |_| Ok(Arc::new(IdentityFeatures)));
        r.register_identity("mock", |s| Ok(Arc::new(RandomProjection::new(s.seed, 16, 64, true))));
        r.register_pose("mock", |_| Ok(Arc::new(SpherePoseEstimator)));
        r.register_features("mock", |s| Ok(Arc::new(RandomProjection::new(s.seed, 16, 16, false))));
        r
    }

    pub fn register_latent(
        &mut self,
        name: &str,
        f: impl Fn(&AdapterSpec, &AdapterSpec, LatentLayout) -> AdapterResult<(Arc<dyn InversionEncoder>, Arc<dyn StyleDecoder>)> + 'static,
    ) {
        self.latent.insert(name.to_string(), Box::new(f));
    }

    pub fn register_perceptual(&mut self, name: &str, f: impl Fn(&AdapterSpec) -> AdapterResult<Arc<dyn PerceptualFeatures>> + 'static) {
        self.perceptual.insert(name.to_string(), Box::new(f));
    }

    pub fn register_identity(&mut self, name: &str, f: impl Fn(&AdapterSpec) -> AdapterResult<Arc<dyn IdentityEmbedder>> + 'static) {
        self.identity.insert(name.to_string(), Box::new(f));
    }

    pub fn register_pose(&mut self, name: &str, f: impl Fn(&AdapterSpec) -> AdapterResult<Arc<dyn PoseEstimator>> + 'static) {
        self.pose.insert(name.to_string(), Box::new(f));
    }

    pub fn register_features(&mut self, name: &str, f: impl Fn(&AdapterSpec) -> AdapterResult<Arc<dyn FeatureExtractor>> + 'static) {
        self.features.insert(name.to_string(), Box::new(f));
    }

    pub fn build_features(&self, spec: &AdapterSpec) -> AdapterResult<Arc<dyn FeatureExtractor>> {
        lookup(&self.features, "features", &spec.backend)?(spec)
    }

    pub fn build_identity(&self, spec: &AdapterSpec) -> AdapterResult<Arc<dyn IdentityEmbedder>> {
        lookup(&self.identity, "identity", &spec.backend)?(spec)
    }

    pub fn build_pose(&self, spec: &AdapterSpec) -> AdapterResult<Arc<dyn PoseEstimator>> {
        lookup(&self.pose, "pose-estimator", &spec.backend)?(spec)
    }

    pub fn build(&self, cfg: &AdapterConfig, layout: LatentLayout) -> AdapterResult<Backends> {
        if cfg.encoder.backend != cfg.decoder.backend {
            return Err(AdapterError::Backend {
                role: "encoder",
                backend: cfg.encoder.backend.clone(),
                reason: format!("must pair with the decoder backend `{}`", cfg.decoder.backend),
            });
        }
        let ctor = lookup(&self.latent, "encoder", &cfg.encoder.backend)?;
        let (encoder, decoder) = ctor(&cfg.encoder, &cfg.decoder, layout)?;
        if decoder.layers() != layout.layers || encoder.layers() != layout.layers {
            return Err(AdapterError::Shape {
                role: "decoder",
                got: vec![decoder.layers()],
                expected: vec![layout.layers],
            });
        }
        Ok(Backends {
            encoder,
            decoder,
            perceptual: lookup(&self.perceptual, "perceptual", &cfg.perceptual.backend)?(&cfg.perceptual)?,
            identity: self.build_identity(&cfg.identity)?,
            pose_estimator: self.build_pose(&cfg.pose_estimator)?,
            features: self.build_features(&cfg.features)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mock_matrix_has_orthonormal_rows() {
        let sp = LinearMockSpace::new(3, 6, 8, 2, 8);
        let m = &sp.matrix;
        let gram = Tensor::matmul(m, m, false, true);
        let n = m.shape()[0];
        let eye = Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 });
        assert!(gram.max_abs_diff(&eye) < 1e-12);
    }

    #[test]
    fn unknown_backend_is_typed_error() {
        let reg = AdapterRegistry::with_mocks();
        let mut cfg = AdapterConfig::default();
        cfg.identity.backend = "arcface".into();
        let layout = LatentLayout { layers: 6, width: 8, editable: 2, resolution: 8 };
        assert!(matches!(reg.build(&cfg, layout), Err(AdapterError::UnknownBackend { .. })));
        assert!(reg.build(&AdapterConfig::default(), layout).is_ok());
    }

    #[test]
    fn identity_embedding_is_unit_norm() {
        let e = RandomProjection::new(1, 4, 8, true);
        let img = Tensor::from_fn(&[8, 8, 3], |i| (i % 7) as f64 / 7.0);
        let v = e.embed(&img).unwrap();
        let n: f64 = v.iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }
}
