use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use surfgan_core::adapters::{mock_pair, Adapter, IdentityFeatures, InversionEncoder, MockDecoder, StyleDecoder};
use surfgan_core::injection::{
    apply_direction, InjectionBackends, InjectionConfig, InjectionModel, InjectionTrainer, LatentCode, LinearPoseSource,
    PART_NAMES,
};
use surfgan_core::{AdapterError, Error};
use surfgan_grad::Var;

fn config() -> InjectionConfig {
    InjectionConfig {
        layers: 4,
        width: 6,
        editable: 2,
        mapper_hidden: 8,
        directions: 2,
        steps: 10,
        batch_size: 2,
        triplet_resolution: 8,
        decoder_resolution: 8,
        frozen_check_every: 2,
        ..Default::default()
    }
}

fn code(seed: u64) -> LatentCode {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LatentCode::new(4, 6, 2, (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn model(seed: u64) -> InjectionModel {
    InjectionModel::new(&config(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn diff(a: &LatentCode, b: &LatentCode) -> Vec<f64> {
    a.values().iter().zip(b.values()).map(|(x, y)| x - y).collect()
}

/// Decoder whose weights can be nudged after the trainer has recorded them.
struct Drifting {
    inner: MockDecoder,
    drift: AtomicU64,
}

impl Adapter for Drifting {
    fn backend(&self) -> &str {
        "drifting"
    }

    fn fingerprint(&self) -> u64 {
        self.inner.fingerprint() ^ self.drift.load(Ordering::SeqCst)
    }
}

impl StyleDecoder for Drifting {
    fn layers(&self) -> usize {
        self.inner.layers()
    }

    fn resolution(&self) -> usize {
        self.inner.resolution()
    }

    fn decode(&self, codes: &Var) -> Result<Var, AdapterError> {
        self.inner.decode(codes)
    }
}

fn setup(decoder: Arc<dyn StyleDecoder>) -> (InjectionBackends, LinearPoseSource) {
    let cfg = config();
    let (enc, dec) = mock_pair(5, cfg.layers, cfg.width, cfg.editable, cfg.decoder_resolution);
    let template = enc.space.mean_latent.clone();
    let backends = InjectionBackends {
        encoder: Arc::new(enc),
        decoder,
        perceptual: Arc::new(IdentityFeatures),
    };
    let source = LinearPoseSource::new(Arc::new(dec), template, 8, 10.0, 0.5, 0.8, 7);
    (backends, source)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pose_offset_is_linear_in_the_view(seed in 0u64..1000, p in -1.0f64..1.0, y in -1.0f64..1.0) {
        let (m, w) = (model(seed), code(seed + 1));
        let dp = diff(&m.apply_pose(&w, (1.0, 0.0)).unwrap(), &w);
        let dy = diff(&m.apply_pose(&w, (0.0, 1.0)).unwrap(), &w);
        let got = diff(&m.apply_pose(&w, (p, y)).unwrap(), &w);
        for i in 0..got.len() {
            prop_assert!((got[i] - (p * dp[i] + y * dy[i])).abs() < 1e-12);
        }
        prop_assert!(got[w.slice_len()..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn canonicalization_keeps_the_frozen_layers(seed in 0u64..1000) {
        let (m, w) = (model(seed), code(seed + 2));
        let c = m.canonicalize(&w).unwrap();
        prop_assert_eq!(&c.values()[w.slice_len()..], &w.values()[w.slice_len()..]);
    }
}

#[test]
fn frontal_view_returns_the_code_unchanged() {
    let (m, w) = (model(1), code(2));
    assert_eq!(m.apply_pose(&w, (0.0, 0.0)).unwrap(), w);
    assert_eq!(apply_direction(&w, &vec![1.0; 24], 0.0).unwrap(), w);
    assert_ne!(apply_direction(&w, &vec![1.0; 24], 0.5).unwrap(), w);
}

#[test]
fn reported_total_is_the_sum_of_parts() {
    let cfg = config();
    let (_, dec) = mock_pair(5, cfg.layers, cfg.width, cfg.editable, cfg.decoder_resolution);
    let (backends, source) = setup(Arc::new(dec));
    let mut t = InjectionTrainer::new(&cfg, 3, &backends).unwrap();
    for step in 0..3 {
        let r = t.train_step(&source, &backends).unwrap();
        assert_eq!(r.step, step);
        assert_eq!(r.parts.len(), PART_NAMES.len());
        let sum: f64 = r.parts.iter().sum();
        assert!((sum - r.total).abs() <= 1e-9 * r.total.abs().max(1.0), "{sum} vs {}", r.total);
    }
}

#[test]
fn mutated_backend_stops_training() {
    let cfg = config();
    let (_, dec) = mock_pair(5, cfg.layers, cfg.width, cfg.editable, cfg.decoder_resolution);
    let drifting = Arc::new(Drifting {
        inner: dec,
        drift: AtomicU64::new(0),
    });
    let (backends, source) = setup(drifting.clone());
    let mut t = InjectionTrainer::new(&cfg, 3, &backends).unwrap();
    t.train_step(&source, &backends).unwrap();
    t.check_frozen(&backends).unwrap();
    drifting.drift.store(1, Ordering::SeqCst);
    let err = t.train_step(&source, &backends).unwrap_err();
    assert!(
        matches!(err, Error::Adapter(AdapterError::FrozenBackendMutated { role: "decoder", .. })),
        "{err:?}"
    );
}

#[test]
fn mock_adapters_are_pure() {
    let cfg = config();
    let (enc, dec) = mock_pair(9, cfg.layers, cfg.width, cfg.editable, cfg.decoder_resolution);
    let w = code(4);
    let before = w.clone();
    let img = dec.decode_code(&w).unwrap();
    assert_eq!(dec.decode_code(&w).unwrap(), img);
    assert_eq!(w, before);
    let snapshot = img.clone();
    let a = enc.encode(&img).unwrap();
    assert_eq!(enc.encode(&img).unwrap(), a);
    assert_eq!(img, snapshot);
    // Decoding depends only on the editable slice, which the encoder inverts.
    let slice = |c: &LatentCode| c.editable_slice().to_vec();
    let err = slice(&a).iter().zip(slice(&w)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(err < 1e-8, "round trip error {err}");
}

#[test]
fn learning_rate_decays_along_a_cosine() {
    let cfg = InjectionConfig { lr: 1e-3, final_lr_fraction: 0.01, steps: 100, ..config() };
    assert_eq!(cfg.lr_at(0), 1e-3);
    assert!((cfg.lr_at(50) - 0.5 * (1e-3 + 1e-5)).abs() < 1e-15);
    assert!((cfg.lr_at(100) - 1e-5).abs() < 1e-18);
    assert_eq!(cfg.lr_at(500), cfg.lr_at(100));
    let flat = InjectionConfig { final_lr_fraction: 1.0, ..cfg };
    assert!((0..120).all(|s| (flat.lr_at(s) - 1e-3).abs() < 1e-18));
}
