use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use surfgan_grad::check::{numeric_gradient, relative_error};
use surfgan_grad::{backward, grad, Tensor, Var};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Checks the autodiff gradient of `f` against central differences.
fn check(shape: &[usize], seed: u64, f: impl Fn(&Var) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = rand_tensor(&mut rng, shape);
    let x = Var::param(x0.clone());
    let g = backward(&f(&x), &[&x]).remove(0);
    let fd = numeric_gradient(|t| f(&Var::constant(t.clone())).item(), &x0, 1e-6);
    let err = relative_error(&g, &fd, 1e-6);
    assert!(err < 1e-6, "relative error {err}: analytic {g:?} vs numeric {fd:?}");
}

#[test]
fn elementwise_ops() {
    check(&[3, 4], 1, |x| x.sin().sum());
    check(&[3, 4], 2, |x| x.cos().mul(x).sum());
    check(&[3, 4], 3, |x| x.exp().sum());
    check(&[5], 4, |x| x.add_scalar(2.0).ln().sum());
    check(&[5], 5, |x| x.add_scalar(2.0).sqrt().sum());
    check(&[3, 4], 6, |x| x.sigmoid().square().sum());
    check(&[3, 4], 7, |x| x.scale(3.0).softplus().sum());
    check(&[3, 4], 8, |x| x.tanh().sum());
    check(&[3, 4], 9, |x| x.leaky_relu(0.2).square().sum());
    check(&[3, 4], 10, |x| x.abs().sum());
    check(&[3, 4], 11, |x| x.div(&x.square().add_scalar(1.0)).sum());
}

#[test]
fn broadcasting_ops() {
    let b = Var::constant(Tensor::new(&[4], vec![0.5, -1.0, 2.0, 0.1]));
    check(&[3, 4], 20, |x| x.mul(&b).sin().sum());
    let col = Var::constant(Tensor::new(&[2, 1, 1], vec![0.3, -0.7]));
    check(&[2, 3, 4], 21, |x| x.mul(&col).add(x).square().sum());
    check(&[1, 4], 22, |x| x.broadcast_to(&[3, 4]).sin().sum());
    check(&[3, 4], 23, |x| x.sum_axis(0).square().sum());
    check(&[2, 3, 4], 24, |x| x.sum_to(&[2, 1, 4]).exp().sum());
}

#[test]
fn matmul_all_transposes() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let w = Var::constant(rand_tensor(&mut rng, &[4, 5]));
    let wt = Var::constant(rand_tensor(&mut rng, &[5, 4]));
    check(&[3, 4], 31, |x| Var::mm(x, &w, false, false).sin().sum());
    check(&[4, 3], 32, |x| Var::mm(x, &w, true, false).sin().sum());
    check(&[3, 4], 33, |x| Var::mm(x, &wt, false, true).sin().sum());
    check(&[4, 3], 34, |x| Var::mm(x, &wt, true, true).sin().sum());
    check(&[5, 2], 35, |x| Var::mm(&w, x, false, false).sin().sum());
    check(&[2, 5], 36, |x| Var::mm(&wt, x, true, true).sin().sum());
}

#[test]
fn structural_ops() {
    check(&[2, 5, 3], 40, |x| x.narrow(1, 1, 3).sin().sum());
    check(&[2, 3], 41, |x| {
        let y = Var::concat(&[x.sin(), x.square(), x.narrow(1, 0, 1)], 1);
        y.mul(&y).sum()
    });
    check(&[3, 6], 42, |x| x.cumsum_exclusive().sin().sum());
    check(&[3, 6], 43, |x| x.rev_cumsum_exclusive().sin().sum());
    check(&[2, 4, 4, 3], 44, |x| x.unfold2d(3, 1, 1).sin().sum());
    check(&[1, 5, 5, 2], 45, |x| x.unfold2d(3, 2, 1).square().sum());
    check(&[6], 46, |x| x.reshape(&[2, 3]).narrow(0, 1, 1).exp().sum());
}

#[test]
fn second_order_gradient_penalty() {
    // penalty(w) = |d/dx f(x, w)|^2 with f = sum(sin(x w)); compare the
    // double-backward gradient in w with finite differences of the penalty.
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let x0 = rand_tensor(&mut rng, &[2, 3]);
    let w0 = rand_tensor(&mut rng, &[3, 2]);
    let penalty = |w: &Var| {
        let x = Var::param(x0.clone());
        let f = x.matmul(w).sin().leaky_relu(0.2).sum();
        let gx = grad(&f, &[&x], true).remove(0);
        gx.square().sum()
    };
    let w = Var::param(w0.clone());
    let g = backward(&penalty(&w), &[&w]).remove(0);
    let fd = numeric_gradient(|t| penalty(&Var::param(t.clone())).item(), &w0, 1e-6);
    let err = relative_error(&g, &fd, 1e-6);
    assert!(err < 1e-6, "second-order mismatch {err}: {g:?} vs {fd:?}");
}

#[test]
fn unused_input_gets_zero_gradient() {
    let a = Var::param(Tensor::ones(&[2]));
    let b = Var::param(Tensor::ones(&[3]));
    let g = backward(&a.sum(), &[&a, &b]);
    assert_eq!(g[1], Tensor::zeros(&[3]));
}

#[test]
fn custom_op_uses_supplied_vjp() {
    let x = Var::param(Tensor::new(&[2], vec![1.0, 2.0]));
    let y = Var::custom(&x, x.value().map(|v| 3.0 * v), |_, g| g.map(|v| 3.0 * v));
    let g = backward(&y.sum(), &[&x]).remove(0);
    assert_eq!(g.data(), &[3.0, 3.0]);
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

proptest! {
    #[test]
    fn sum_to_is_adjoint_of_broadcast(seed in 0u64..1000, lead in 1usize..4, mid in 1usize..4, last in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let small_shape = [lead, 1, last];
        let big_shape = [lead, mid, last];
        let x = rand_tensor(&mut rng, &small_shape);
        let y = rand_tensor(&mut rng, &big_shape);
        let lhs = dot(&x.broadcast_to(&big_shape), &y);
        let rhs = dot(&x, &y.sum_to(&small_shape));
        prop_assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn fold_is_adjoint_of_unfold(seed in 0u64..1000, h in 2usize..6, w in 2usize..6, stride in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Var::param(rand_tensor(&mut rng, &[1, h, w, 2]));
        let cols = x.unfold2d(2, stride, 1);
        let y = rand_tensor(&mut rng, cols.shape());
        // <unfold(x), y> = <x, fold(y)>; the gradient of the left side in x is fold(y).
        let lhs = dot(cols.value(), &y);
        let g = backward(&cols.mul(&Var::constant(y)).sum(), &[&x]).remove(0);
        prop_assert!((lhs - dot(x.value(), &g)).abs() < 1e-10);
    }
}
