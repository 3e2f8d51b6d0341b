use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use surfgan_core::generator::{edit_control, surf_block, ControlCode, ControlIndex, GeneratorConfig, GeneratorState};
use surfgan_grad::{Tensor, Var};

fn config() -> GeneratorConfig {
    GeneratorConfig {
        k: 3,
        t: 2,
        hidden: 8,
        mod_dim: 8,
        noise_dim: 2,
        ..Default::default()
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn modulation_is_affine_in_the_coefficients(
        seed in any::<u64>(),
        a in prop::collection::vec(-3.0f64..3.0, 3),
        b in prop::collection::vec(-3.0f64..3.0, 3),
        s in -2.0f64..2.0,
    ) {
        let g = GeneratorState::new(&config(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let layer = &g.layers[0].subspace;
        let mu = layer.mu.value().to_vec();
        let centered = |z: &[f64]| -> Vec<f64> {
            layer.modulation(z).unwrap().iter().zip(&mu).map(|(p, m)| p - m).collect()
        };
        let combo: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + s * y).collect();
        let (fa, fb, fc) = (centered(&a), centered(&b), centered(&combo));
        for i in 0..mu.len() {
            prop_assert!((fc[i] - (fa[i] + s * fb[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_film_block_is_the_identity(seed in any::<u64>(), rows in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let psi = Var::constant(uniform(&mut rng, &[1, rows, 6], 2.0));
        let w = Var::constant(uniform(&mut rng, &[6, 6], 1.0));
        let b = Var::constant(uniform(&mut rng, &[6], 1.0));
        let zero = Var::constant(Tensor::zeros(&[1, 1, 6]));
        let out = surf_block(&psi, &zero, &zero, &w, &b);
        prop_assert_eq!(out.value().data(), psi.value().data());
    }

    #[test]
    fn density_ignores_the_viewing_direction(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = GeneratorState::new(&config(), &mut rng).unwrap();
        let m = g.modulations(&[ControlCode::sample(&mut rng, &g.config)]).unwrap();
        let pos = Var::constant(uniform(&mut rng, &[1, 5, 3], 0.2));
        let d1 = Var::constant(uniform(&mut rng, &[1, 5, 3], 1.0));
        let d2 = Var::constant(uniform(&mut rng, &[1, 5, 3], 1.0));
        let (a, b) = (g.field(&m, &pos, &d1), g.field(&m, &pos, &d2));
        prop_assert_eq!(a.sigma.value().data(), b.sigma.value().data());
        prop_assert!(a.sigma.value().data().iter().all(|&s| s >= 0.0));
    }

    #[test]
    fn edit_touches_exactly_one_coefficient(
        seed in any::<u64>(),
        layer in 1usize..=3,
        dim in 1usize..=3,
        value in -5.0f64..5.0,
    ) {
        let cfg = config();
        let code = ControlCode::sample(&mut ChaCha8Rng::seed_from_u64(seed), &cfg);
        let edited = edit_control(&code, ControlIndex { layer, dim }, value).unwrap();
        prop_assert_eq!(&edited.eps, &code.eps);
        let mut changed = 0;
        for (i, (ga, gb)) in code.z.iter().zip(&edited.z).enumerate() {
            for (j, (x, y)) in ga.iter().zip(gb).enumerate() {
                if (i, j) == (layer - 1, dim - 1) {
                    prop_assert_eq!(*y, value);
                } else {
                    prop_assert_eq!(x, y);
                }
                changed += (x != y) as usize;
            }
        }
        prop_assert!(changed <= 1);
    }
}

#[test]
fn out_of_range_control_is_rejected() {
    let cfg = config();
    let code = ControlCode::zeros(&cfg);
    assert!(edit_control(&code, ControlIndex { layer: 4, dim: 1 }, 1.0).is_err());
    assert!(edit_control(&code, ControlIndex { layer: 1, dim: 4 }, 1.0).is_err());
    assert!("L0D1".parse::<ControlIndex>().is_err());
}
