//! Dense row-major `f64` tensors with numpy-style broadcasting.

use std::fmt;
use std::sync::Arc;

/// Row-major dense tensor. Storage is shared copy-on-write, so `clone` and
/// `reshape` are cheap.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            numel(shape),
            data.len(),
            "shape {:?} does not match {} elements",
            shape,
            data.len()
        );
        Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(&[], vec![v])
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::new(shape, vec![v; numel(shape)])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        Self::new(shape, (0..numel(shape)).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    pub fn into_vec(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|a| (*a).clone())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            numel(shape),
            self.numel(),
            "cannot reshape {:?} into {:?}",
            self.shape,
            shape
        );
        Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::new(&self.shape, self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Elementwise binary op with broadcasting.
    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let out = broadcast_shapes(&self.shape, &other.shape).unwrap_or_else(|| {
            panic!(
                "shapes {:?} and {:?} are not broadcastable",
                self.shape, other.shape
            )
        });
        let n = numel(&out);
        let a = self.data();
        let b = other.data();
        let pa = plan(&self.shape, &out);
        let pb = plan(&other.shape, &out);
        let data: Vec<f64> = match (&pa, &pb) {
            (Bcast::Same, Bcast::Same) => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
            (Bcast::Same, Bcast::Scalar) => a.iter().map(|&x| f(x, b[0])).collect(),
            (Bcast::Scalar, Bcast::Same) => b.iter().map(|&y| f(a[0], y)).collect(),
            (Bcast::Same, Bcast::Tile(m)) => a
                .chunks(*m)
                .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| f(x, y)))
                .collect(),
            (Bcast::Tile(m), Bcast::Same) => b
                .chunks(*m)
                .flat_map(|row| a.iter().zip(row).map(|(&x, &y)| f(x, y)))
                .collect(),
            _ => {
                let sa = pa.strides(&self.shape, &out);
                let sb = pb.strides(&other.shape, &out);
                let mut data = Vec::with_capacity(n);
                walk2(&out, &sa, &sb, |ia, ib| data.push(f(a[ia], b[ib])));
                data
            }
        };
        Tensor::new(&out, data)
    }

    /// Sums this tensor down to `shape`, the adjoint of broadcasting.
    pub fn sum_to(&self, shape: &[usize]) -> Tensor {
        if shape == self.shape.as_slice() {
            return self.clone();
        }
        let out = broadcast_shapes(shape, &self.shape);
        assert!(
            out.as_deref() == Some(self.shape.as_slice()),
            "cannot sum {:?} down to {:?}",
            self.shape,
            shape
        );
        let src = self.data();
        let mut acc = vec![0.0; numel(shape)];
        match plan(shape, &self.shape) {
            Bcast::Same => acc.copy_from_slice(src),
            Bcast::Scalar => acc[0] = src.iter().sum(),
            Bcast::Tile(m) => {
                for row in src.chunks(m) {
                    for (a, &x) in acc.iter_mut().zip(row) {
                        *a += x;
                    }
                }
            }
            p @ Bcast::General => {
                let s = p.strides(shape, &self.shape);
                let ones = contiguous_strides(&self.shape);
                walk2(&self.shape, &s, &ones, |is, i| acc[is] += src[i]);
            }
        }
        Tensor::new(shape, acc)
    }

    /// Broadcasts to a larger shape, materializing the result.
    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor {
        if shape == self.shape.as_slice() {
            return self.clone();
        }
        let out = broadcast_shapes(&self.shape, shape);
        assert!(
            out.as_deref() == Some(shape),
            "cannot broadcast {:?} to {:?}",
            self.shape,
            shape
        );
        let src = self.data();
        let n = numel(shape);
        let data = match plan(&self.shape, shape) {
            Bcast::Same => src.to_vec(),
            Bcast::Scalar => vec![src[0]; n],
            Bcast::Tile(_) => src.iter().copied().cycle().take(n).collect(),
            p @ Bcast::General => {
                let s = p.strides(&self.shape, shape);
                let ones = contiguous_strides(shape);
                let mut data = Vec::with_capacity(n);
                walk2(shape, &s, &ones, |is, _| data.push(src[is]));
                data
            }
        };
        Tensor::new(shape, data)
    }

    /// `op(a) @ op(b)` for 2-D operands, where `op` optionally transposes.
    pub fn matmul(a: &Tensor, b: &Tensor, trans_a: bool, trans_b: bool) -> Tensor {
        assert_eq!(a.ndim(), 2, "matmul lhs must be 2-D, got {:?}", a.shape);
        assert_eq!(b.ndim(), 2, "matmul rhs must be 2-D, got {:?}", b.shape);
        let (ar, ac) = (a.shape[0], a.shape[1]);
        let (br, bc) = (b.shape[0], b.shape[1]);
        let (m, k, rsa, csa) = if trans_a { (ac, ar, 1, ac) } else { (ar, ac, ac, 1) };
        let (k2, n, rsb, csb) = if trans_b { (bc, br, 1, bc) } else { (br, bc, bc, 1) };
        assert_eq!(
            k, k2,
            "matmul inner dims differ: {:?}{} x {:?}{}",
            a.shape,
            if trans_a { "^T" } else { "" },
            b.shape,
            if trans_b { "^T" } else { "" }
        );
        let mut c = vec![0.0; m * n];
        if m > 0 && n > 0 && k > 0 {
            // SAFETY: strides describe in-bounds views of `a`, `b` and `c`.
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    k,
                    n,
                    1.0,
                    a.data.as_ptr(),
                    rsa as isize,
                    csa as isize,
                    b.data.as_ptr(),
                    rsb as isize,
                    csb as isize,
                    0.0,
                    c.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        Tensor::new(&[m, n], c)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}[", self.shape)?;
        for (i, x) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{x:.6}")?;
        }
        if self.numel() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        s[i] = acc;
        acc *= shape[i];
    }
    s
}

/// How a broadcast operand maps onto the output index space.
enum Bcast {
    Same,
    Scalar,
    /// Operand is a trailing block repeated along leading axes.
    Tile(usize),
    General,
}

fn plan(inp: &[usize], out: &[usize]) -> Bcast {
    let n_in = numel(inp);
    if n_in == numel(out) {
        return Bcast::Same;
    }
    if n_in == 1 {
        return Bcast::Scalar;
    }
    let first = inp.iter().position(|&d| d != 1).unwrap_or(inp.len());
    let core = &inp[first..];
    if out.ends_with(core) {
        return Bcast::Tile(n_in);
    }
    Bcast::General
}

impl Bcast {
    /// Strides of `inp` in `out`'s index space, zero on broadcast axes.
    fn strides(&self, inp: &[usize], out: &[usize]) -> Vec<usize> {
        let cs = contiguous_strides(inp);
        let off = out.len() - inp.len();
        (0..out.len())
            .map(|i| {
                if i < off || inp[i - off] == 1 {
                    0
                } else {
                    cs[i - off]
                }
            })
            .collect()
    }
}

/// Odometer walk over `shape`, yielding linear indices under two stride sets.
fn walk2(shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize)) {
    if shape.is_empty() {
        f(0, 0);
        return;
    }
    if numel(shape) == 0 {
        return;
    }
    let nd = shape.len();
    let inner = shape[nd - 1];
    let (ia_step, ib_step) = (sa[nd - 1], sb[nd - 1]);
    let mut idx = vec![0usize; nd - 1];
    let (mut base_a, mut base_b) = (0usize, 0usize);
    loop {
        let (mut ia, mut ib) = (base_a, base_b);
        for _ in 0..inner {
            f(ia, ib);
            ia += ia_step;
            ib += ib_step;
        }
        let mut d = nd - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            base_a += sa[d];
            base_b += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            base_a -= sa[d] * shape[d];
            base_b -= sb[d] * shape[d];
            idx[d] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_add_rows() {
        let a = Tensor::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let b = Tensor::new(&[3], vec![10., 20., 30.]);
        let c = a.zip_with(&b, |x, y| x + y);
        assert_eq!(c.data(), &[11., 22., 33., 14., 25., 36.]);
        assert_eq!(c.sum_to(&[3]).data(), &[25., 47., 69.]);
    }

    #[test]
    fn broadcast_middle_axis() {
        let a = Tensor::from_fn(&[2, 3, 2], |i| i as f64);
        let b = Tensor::new(&[2, 1, 2], vec![100., 200., 300., 400.]);
        let c = a.zip_with(&b, |x, y| x + y);
        assert_eq!(c.shape(), &[2, 3, 2]);
        assert_eq!(c.data()[0], 100.);
        assert_eq!(c.data()[5], 205.);
        assert_eq!(c.data()[6], 306.);
        let s = Tensor::ones(&[2, 3, 2]).sum_to(&[2, 1, 2]);
        assert_eq!(s.data(), &[3., 3., 3., 3.]);
        let bb = b.broadcast_to(&[2, 3, 2]);
        assert_eq!(bb.data()[4], 100.);
        assert_eq!(bb.data()[11], 400.);
    }

    #[test]
    fn matmul_transposes() {
        let a = Tensor::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let b = Tensor::new(&[3, 2], vec![1., 0., 0., 1., 1., 1.]);
        assert_eq!(Tensor::matmul(&a, &b, false, false).data(), &[4., 5., 10., 11.]);
        let at = Tensor::new(&[3, 2], vec![1., 4., 2., 5., 3., 6.]);
        assert_eq!(Tensor::matmul(&at, &b, true, false).data(), &[4., 5., 10., 11.]);
        let bt = Tensor::new(&[2, 3], vec![1., 0., 1., 0., 1., 1.]);
        assert_eq!(Tensor::matmul(&a, &bt, false, true).data(), &[4., 5., 10., 11.]);
    }
}
