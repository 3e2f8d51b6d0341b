//! Differentiable operations on [`Var`].
//!
//! Backward rules are expressed with the same ops, so every rule here is
//! itself differentiable. Nonsmooth ops (`abs`, `leaky_relu`) use a constant
//! mask in their backward rule, which makes their second derivative zero.

use crate::tensor::{numel, Tensor};
use crate::var::Var;

fn unary(x: &Var, value: Tensor, back: impl Fn(&Var, &Var, &Var) -> Var + 'static) -> Var {
    Var::from_op(value, vec![x.clone()], move |p, out, g| {
        vec![Some(back(&p[0], out, g))]
    })
}

fn sign_mask(t: &Tensor) -> Tensor {
    t.map(|x| {
        if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        }
    })
}

fn sigmoid_f(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_f(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Var {
    pub fn add(&self, other: &Var) -> Var {
        let value = self.value().zip_with(other.value(), |a, b| a + b);
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Var::from_op(value, vec![self.clone(), other.clone()], move |_, _, g| {
            vec![Some(g.sum_to(&sa)), Some(g.sum_to(&sb))]
        })
    }

    pub fn sub(&self, other: &Var) -> Var {
        let value = self.value().zip_with(other.value(), |a, b| a - b);
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Var::from_op(value, vec![self.clone(), other.clone()], move |_, _, g| {
            vec![Some(g.sum_to(&sa)), Some(g.neg().sum_to(&sb))]
        })
    }

    pub fn mul(&self, other: &Var) -> Var {
        let value = self.value().zip_with(other.value(), |a, b| a * b);
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Var::from_op(value, vec![self.clone(), other.clone()], move |p, _, g| {
            vec![
                Some(g.mul(&p[1]).sum_to(&sa)),
                Some(g.mul(&p[0]).sum_to(&sb)),
            ]
        })
    }

    pub fn div(&self, other: &Var) -> Var {
        let value = self.value().zip_with(other.value(), |a, b| a / b);
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Var::from_op(value, vec![self.clone(), other.clone()], move |p, out, g| {
            let ga = g.div(&p[1]).sum_to(&sa);
            let gb = g.mul(out).div(&p[1]).neg().sum_to(&sb);
            vec![Some(ga), Some(gb)]
        })
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Var {
        unary(self, self.value().map(|x| x * c), move |_, _, g| g.scale(c))
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        unary(self, self.value().map(|x| x + c), |_, _, g| g.clone())
    }

    pub fn square(&self) -> Var {
        self.mul(self)
    }

    pub fn sin(&self) -> Var {
        unary(self, self.value().map(f64::sin), |x, _, g| g.mul(&x.cos()))
    }

    pub fn cos(&self) -> Var {
        unary(self, self.value().map(f64::cos), |x, _, g| {
            g.mul(&x.sin()).neg()
        })
    }

    pub fn exp(&self) -> Var {
        unary(self, self.value().map(f64::exp), |_, out, g| g.mul(out))
    }

    pub fn ln(&self) -> Var {
        unary(self, self.value().map(f64::ln), |x, _, g| g.div(x))
    }

    pub fn sqrt(&self) -> Var {
        unary(self, self.value().map(f64::sqrt), |_, out, g| {
            g.div(out).scale(0.5)
        })
    }

    pub fn sigmoid(&self) -> Var {
        unary(self, self.value().map(sigmoid_f), |_, out, g| {
            let one_minus = out.neg().add_scalar(1.0);
            g.mul(&out.mul(&one_minus))
        })
    }

    /// `ln(1 + e^x)`, computed stably.
    pub fn softplus(&self) -> Var {
        unary(self, self.value().map(softplus_f), |x, _, g| g.mul(&x.sigmoid()))
    }

    pub fn tanh(&self) -> Var {
        unary(self, self.value().map(f64::tanh), |_, out, g| {
            g.mul(&out.square().neg().add_scalar(1.0))
        })
    }

    pub fn abs(&self) -> Var {
        unary(self, self.value().map(f64::abs), |x, _, g| {
            g.mul(&Var::constant(sign_mask(x.value())))
        })
    }

    pub fn relu(&self) -> Var {
        self.leaky_relu(0.0)
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        let value = self.value().map(|x| if x > 0.0 { x } else { slope * x });
        unary(self, value, move |x, _, g| {
            let mask = x.value().map(|v| if v > 0.0 { 1.0 } else { slope });
            g.mul(&Var::constant(mask))
        })
    }

    pub fn sum(&self) -> Var {
        let shape = self.shape().to_vec();
        unary(self, Tensor::scalar(self.value().sum()), move |_, _, g| {
            g.broadcast_to(&shape)
        })
    }

    pub fn mean(&self) -> Var {
        self.sum().scale(1.0 / self.numel() as f64)
    }

    /// Reduces broadcast axes so the result has `shape` (keep-dims style).
    pub fn sum_to(&self, shape: &[usize]) -> Var {
        if shape == self.shape() {
            return self.clone();
        }
        let from = self.shape().to_vec();
        unary(self, self.value().sum_to(shape), move |_, _, g| {
            g.broadcast_to(&from)
        })
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Var {
        if shape == self.shape() {
            return self.clone();
        }
        let from = self.shape().to_vec();
        unary(self, self.value().broadcast_to(shape), move |_, _, g| {
            g.sum_to(&from)
        })
    }

    /// Sum over one axis, keeping it with size one.
    pub fn sum_axis(&self, axis: usize) -> Var {
        let mut shape = self.shape().to_vec();
        shape[axis] = 1;
        self.sum_to(&shape)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        if shape == self.shape() {
            return self.clone();
        }
        let from = self.shape().to_vec();
        unary(self, self.value().reshape(shape), move |_, _, g| g.reshape(&from))
    }

    pub fn matmul(&self, other: &Var) -> Var {
        Var::mm(self, other, false, false)
    }

    /// `op(a) @ op(b)` where `op` transposes when the flag is set.
    pub fn mm(a: &Var, b: &Var, ta: bool, tb: bool) -> Var {
        let value = Tensor::matmul(a.value(), b.value(), ta, tb);
        Var::from_op(value, vec![a.clone(), b.clone()], move |p, _, g| {
            let (a, b) = (&p[0], &p[1]);
            // Constant operands (often large fixed matrices) get no gradient.
            let ga = a
                .requires_grad()
                .then(|| if ta { Var::mm(b, g, tb, true) } else { Var::mm(g, b, false, !tb) });
            let gb = b
                .requires_grad()
                .then(|| if tb { Var::mm(g, a, true, ta) } else { Var::mm(a, g, !ta, false) });
            vec![ga, gb]
        })
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var {
        let shape = self.shape().to_vec();
        let full = shape[axis];
        assert!(start + len <= full, "narrow {start}+{len} exceeds axis size {full}");
        let value = narrow_tensor(self.value(), axis, start, len);
        unary(self, value, move |_, _, g| g.pad_axis(axis, start, full))
    }

    /// Embeds into zeros of size `full` along `axis` at offset `start`.
    pub fn pad_axis(&self, axis: usize, start: usize, full: usize) -> Var {
        let len = self.shape()[axis];
        let value = pad_tensor(self.value(), axis, start, full);
        unary(self, value, move |_, _, g| g.narrow(axis, start, len))
    }

    pub fn concat(parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let mut shape = parts[0].shape().to_vec();
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        shape[axis] = sizes.iter().sum();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for (p, &s) in parts.iter().zip(&sizes) {
                let block = s * inner;
                data.extend_from_slice(&p.value().data()[o * block..(o + 1) * block]);
            }
        }
        Var::from_op(Tensor::new(&shape, data), parts.to_vec(), move |_, _, g| {
            let mut off = 0;
            sizes
                .iter()
                .map(|&s| {
                    let piece = g.narrow(axis, off, s);
                    off += s;
                    Some(piece)
                })
                .collect()
        })
    }

    /// Exclusive prefix sum along the last axis: `y_k = sum_{j<k} x_j`.
    pub fn cumsum_exclusive(&self) -> Var {
        let value = scan_tensor(self.value(), false);
        unary(self, value, |_, _, g| g.rev_cumsum_exclusive())
    }

    /// Exclusive suffix sum along the last axis: `y_k = sum_{j>k} x_j`.
    pub fn rev_cumsum_exclusive(&self) -> Var {
        let value = scan_tensor(self.value(), true);
        unary(self, value, |_, _, g| g.cumsum_exclusive())
    }

    /// Image patches for convolution. Input is NHWC `[b, h, w, c]`; output is
    /// `[b * oh * ow, k * k * c]` with column order `(ky, kx, c)`.
    pub fn unfold2d(&self, k: usize, stride: usize, pad: usize) -> Var {
        let geom = ConvGeom::new(self.shape(), k, stride, pad);
        let value = geom.unfold(self.value());
        unary(self, value, move |_, _, g| g.fold2d(&geom))
    }

    fn fold2d(&self, geom: &ConvGeom) -> Var {
        let geom = geom.clone();
        let value = geom.fold(self.value());
        unary(self, value, move |_, _, g| {
            g.unfold2d(geom.k, geom.stride, geom.pad)
        })
    }

    /// Op with a user-supplied vector-Jacobian product. The backward rule is
    /// treated as constant, so only first-order gradients flow through it.
    pub fn custom(
        input: &Var,
        value: Tensor,
        vjp: impl Fn(&Tensor, &Tensor) -> Tensor + 'static,
    ) -> Var {
        unary(input, value, move |x, _, g| {
            Var::constant(vjp(x.value(), g.value()))
        })
    }
}

fn narrow_tensor(t: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let shape = t.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let full = shape[axis];
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    let src = t.data();
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * full * inner + start * inner;
        data.extend_from_slice(&src[base..base + len * inner]);
    }
    Tensor::new(&out_shape, data)
}

fn pad_tensor(t: &Tensor, axis: usize, start: usize, full: usize) -> Tensor {
    let shape = t.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let len = shape[axis];
    let mut out_shape = shape.to_vec();
    out_shape[axis] = full;
    let src = t.data();
    let mut data = vec![0.0; outer * full * inner];
    for o in 0..outer {
        let dst = o * full * inner + start * inner;
        data[dst..dst + len * inner].copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
    }
    Tensor::new(&out_shape, data)
}

fn scan_tensor(t: &Tensor, reverse: bool) -> Tensor {
    let n = *t.shape().last().expect("scan needs at least one axis");
    let mut data = vec![0.0; t.numel()];
    if n > 0 {
        for (src, dst) in t.data().chunks(n).zip(data.chunks_mut(n)) {
            let mut acc = 0.0;
            if reverse {
                for k in (0..n).rev() {
                    dst[k] = acc;
                    acc += src[k];
                }
            } else {
                for k in 0..n {
                    dst[k] = acc;
                    acc += src[k];
                }
            }
        }
    }
    Tensor::new(t.shape(), data)
}

#[derive(Clone, Debug)]
struct ConvGeom {
    b: usize,
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(shape: &[usize], k: usize, stride: usize, pad: usize) -> Self {
        assert_eq!(shape.len(), 4, "unfold2d expects NHWC input, got {shape:?}");
        assert!(stride >= 1 && k >= 1);
        let (b, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        assert!(h + 2 * pad >= k && w + 2 * pad >= k, "kernel larger than padded input");
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        Self { b, h, w, c, k, stride, pad, oh, ow }
    }

    /// Source offset for output pixel `(oy, ox)` and kernel tap `(ky, kx)`.
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad)?;
        (y < self.h && x < self.w).then_some((y, x))
    }

    fn unfold(&self, t: &Tensor) -> Tensor {
        let cols = self.k * self.k * self.c;
        let rows = self.b * self.oh * self.ow;
        let src = t.data();
        let mut data = vec![0.0; rows * cols];
        for bi in 0..self.b {
            for oy in 0..self.oh {
                for ox in 0..self.ow {
                    let r = (bi * self.oh + oy) * self.ow + ox;
                    for ky in 0..self.k {
                        for kx in 0..self.k {
                            if let Some((y, x)) = self.source(oy, ox, ky, kx) {
                                let s = ((bi * self.h + y) * self.w + x) * self.c;
                                let d = r * cols + (ky * self.k + kx) * self.c;
                                data[d..d + self.c].copy_from_slice(&src[s..s + self.c]);
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(&[rows, cols], data)
    }

    fn fold(&self, t: &Tensor) -> Tensor {
        let cols = self.k * self.k * self.c;
        let src = t.data();
        let mut data = vec![0.0; self.b * self.h * self.w * self.c];
        for bi in 0..self.b {
            for oy in 0..self.oh {
                for ox in 0..self.ow {
                    let r = (bi * self.oh + oy) * self.ow + ox;
                    for ky in 0..self.k {
                        for kx in 0..self.k {
                            if let Some((y, x)) = self.source(oy, ox, ky, kx) {
                                let d = ((bi * self.h + y) * self.w + x) * self.c;
                                let s = r * cols + (ky * self.k + kx) * self.c;
                                for ch in 0..self.c {
                                    data[d + ch] += src[s + ch];
                                }
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(&[self.b, self.h, self.w, self.c], data)
    }
}
