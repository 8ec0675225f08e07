//! Dense row-major tensors over f32/f64, the storage type for every
//! differentiable operation in the crate.

use std::fmt;

use crate::error::{Error, Result};

/// Scalar element type for tensors. Implemented for `f32` (training) and
/// `f64` (gradient-check mode).
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssignOps
    + std::iter::Sum
    + Copy
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + 'static
{
    /// Dtype code used by the `.tns` container (0 = f32, 1 = f64).
    const DTYPE: u8;

    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// c[m,n] = a[m,k] * b[k,n] with explicit row/col strides (in elements).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        c: &mut [Self],
    );
}

impl Scalar for f32 {
    const DTYPE: u8 = 0;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        c: &mut [Self],
    ) {
        debug_assert!(c.len() >= m * n);
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

impl Scalar for f64 {
    const DTYPE: u8 = 1;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        c: &mut [Self],
    ) {
        debug_assert!(c.len() >= m * n);
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

/// Dense multi-dimensional array of scalars, row-major.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); n] }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Single element of a [1]-shaped tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    /// Row count / row width of a 2-D tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let w = self.cols();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let w = self.cols();
        &mut self.data[i * w..(i + 1) * w]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_in_place(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// a[m,k] x b[k,n], both row-major.
    pub fn matmul(&self, b: &Self) -> Self {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (b.rows(), b.cols());
        debug_assert_eq!(k, k2, "matmul inner dims {} vs {}", k, k2);
        let mut out = Tensor::zeros(&[m, n]);
        T::gemm(m, k, n, &self.data, k as isize, 1, &b.data, n as isize, 1, &mut out.data);
        out
    }

    /// aᵀ x b where a is [k,m] row-major (result [m,n]).
    pub fn matmul_tn(&self, b: &Self) -> Self {
        let (k, m) = (self.rows(), self.cols());
        let (k2, n) = (b.rows(), b.cols());
        debug_assert_eq!(k, k2);
        let mut out = Tensor::zeros(&[m, n]);
        T::gemm(m, k, n, &self.data, 1, m as isize, &b.data, n as isize, 1, &mut out.data);
        out
    }

    /// a x bᵀ where b is [n,k] row-major (result [m,n]).
    pub fn matmul_nt(&self, b: &Self) -> Self {
        let (m, k) = (self.rows(), self.cols());
        let (n, k2) = (b.rows(), b.cols());
        debug_assert_eq!(k, k2);
        let mut out = Tensor::zeros(&[m, n]);
        T::gemm(m, k, n, &self.data, k as isize, 1, &b.data, 1, k as isize, &mut out.data);
        out
    }

    pub fn transposed(&self) -> Self {
        let (m, n) = (self.rows(), self.cols());
        let mut out = Tensor::zeros(&[n, m]);
        for i in 0..m {
            for j in 0..n {
                out.data[j * m + i] = self.data[i * n + j];
            }
        }
        out
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| x.as_f64()).collect(),
        }
    }

    pub fn from_f64_tensor(t: &Tensor<f64>) -> Self {
        Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&x| T::from_f64(x)).collect(),
        }
    }

    /// Gaussian init via Box-Muller, deterministic for a given rng state.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl rand::Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(gauss(rng) * std)).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    /// Normal truncated at two standard deviations (resampling).
    pub fn trunc_normal(shape: &[usize], std: f64, rng: &mut impl rand::Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let mut x = gauss(rng);
                while x.abs() > 2.0 {
                    x = gauss(rng);
                }
                T::from_f64(x * std)
            })
            .collect();
        Tensor { shape: shape.to_vec(), data }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 12 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

/// One standard normal sample (Box-Muller).
pub fn gauss(rng: &mut impl rand::Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn matmul_matches_naive() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::<f64>::randn(&[5, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng);
        let c = a.matmul(&b);
        for i in 0..5 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.data()[i * 4 + k] * b.data()[k * 3 + j];
                }
                assert!((c.data()[i * 3 + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transposed_matmul_variants_agree() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::<f64>::randn(&[6, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[6, 5], 1.0, &mut rng);
        let direct = a.transposed().matmul(&b);
        let strided = a.matmul_tn(&b);
        for (x, y) in direct.data().iter().zip(strided.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let c = Tensor::<f64>::randn(&[5, 4], 1.0, &mut rng);
        let direct = a.matmul(&c.transposed());
        let strided = a.matmul_nt(&c);
        for (x, y) in direct.data().iter().zip(strided.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn from_vec_rejects_bad_shape() {
        assert!(Tensor::<f32>::from_vec(&[2, 2], vec![1.0; 3]).is_err());
    }
}
