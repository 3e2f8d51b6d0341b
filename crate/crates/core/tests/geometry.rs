use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use surfgan_core::geometry::{
    composite, generate_rays, hierarchical_sample, stratified_sample, CameraView, CompositeOptions, IntervalRule,
};
use surfgan_grad::{Tensor, Var};

fn depths(n: usize, near: f64, far: f64) -> Tensor {
    Tensor::from_fn(&[1, n], |k| near + (k as f64 + 0.5) * (far - near) / n as f64)
}

fn weights_for(sigma: &[f64], rule: IntervalRule) -> Vec<f64> {
    let n = sigma.len();
    let colors = Var::constant(Tensor::zeros(&[1, n, 3]));
    let dens = Var::constant(Tensor::new(&[1, n], sigma.to_vec()));
    let opts = CompositeOptions {
        intervals: rule,
        ..Default::default()
    };
    composite(&colors, &dens, &depths(n, 0.9, 1.1), 0.9, 1.1, &opts)
        .unwrap()
        .weights
        .value()
        .to_vec()
}

fn rule() -> impl Strategy<Value = IntervalRule> {
    prop_oneof![Just(IntervalRule::Cells), Just(IntervalRule::ForwardSentinel)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn weights_are_a_sub_probability(sigma in prop::collection::vec(0.0f64..200.0, 1..24), rule in rule()) {
        let w = weights_for(&sigma, rule);
        prop_assert!(w.iter().all(|&x| x >= 0.0));
        prop_assert!(w.iter().sum::<f64>() <= 1.0 + 1e-12);
    }

    #[test]
    fn denser_sample_never_loses_weight(
        sigma in prop::collection::vec(0.0f64..100.0, 2..16),
        pick in any::<prop::sample::Index>(),
        bump in 0.0f64..100.0,
        rule in rule(),
    ) {
        let k = pick.index(sigma.len());
        let mut raised = sigma.clone();
        raised[k] += bump;
        let (a, b) = (weights_for(&sigma, rule), weights_for(&raised, rule));
        prop_assert_eq!(&a[..k], &b[..k]);
        prop_assert!(b[k] >= a[k] - 1e-15);
    }

    #[test]
    fn refined_grid_shares_ray_directions(
        n in 1usize..12,
        pitch in -0.5f64..0.5,
        yaw in -0.8f64..0.8,
        fov in 8.0f64..40.0,
    ) {
        let view = CameraView { fov_deg: fov, ..CameraView::new(pitch, yaw) };
        let coarse = generate_rays(&view, n, n).unwrap();
        let m = 2 * n - 1;
        let fine = generate_rays(&view, m, m).unwrap();
        for r in 0..n {
            for c in 0..n {
                let d = coarse.directions[r * n + c] - fine.directions[2 * r * m + 2 * c];
                prop_assert!(d.norm() < 1e-12);
            }
        }
    }

    #[test]
    fn hierarchical_samples_are_sorted_and_bounded(
        w in prop::collection::vec(0.0f64..1.0, 8),
        extra in 1usize..12,
        seed in any::<u64>(),
        jitter in any::<bool>(),
    ) {
        let view = CameraView::default();
        let rays = generate_rays(&view, 1, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coarse = stratified_sample(&rays, 4, Some(&mut rng)).unwrap();
        let fine = if jitter {
            hierarchical_sample(&rays, &coarse, &w, extra, Some(&mut rng))
        } else {
            hierarchical_sample::<ChaCha8Rng>(&rays, &coarse, &w, extra, None)
        }
        .unwrap();
        prop_assert_eq!(fine.per_ray, 4 + extra);
        for r in 0..fine.num_rays() {
            let d = fine.ray_depths(r);
            prop_assert!(d.windows(2).all(|p| p[0] <= p[1]));
            prop_assert!(d.iter().all(|t| (view.near..=view.far).contains(t)));
        }
    }
}

#[test]
fn negative_density_is_rejected() {
    let colors = Var::constant(Tensor::zeros(&[1, 2, 3]));
    let dens = Var::constant(Tensor::new(&[1, 2], vec![1.0, -1.0]));
    let opts = CompositeOptions::default();
    assert!(composite(&colors, &dens, &depths(2, 0.9, 1.1), 0.9, 1.1, &opts).is_err());
}
