//! Central finite differences, used as an independent gradient oracle.

use crate::tensor::Tensor;

/// Central-difference gradient of a scalar function of one tensor.
pub fn numeric_gradient(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut grad = vec![0.0; x.numel()];
    let mut probe = x.clone();
    for (i, g) in grad.iter_mut().enumerate() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        *g = (fp - fm) / (2.0 * h);
    }
    Tensor::new(x.shape(), grad)
}

/// Central-difference derivative of `f(x + t d)` at `t = 0`.
pub fn directional_derivative(f: impl Fn(&Tensor) -> f64, x: &Tensor, dir: &Tensor, h: f64) -> f64 {
    let plus = x.zip_with(dir, |a, d| a + h * d);
    let minus = x.zip_with(dir, |a, d| a - h * d);
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// `|a - b| / max(|a|, |b|, floor)`, elementwise maximum over tensors.
pub fn relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
