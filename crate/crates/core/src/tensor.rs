//! Dense row-major tensors, the scalar abstraction, and seeded randomness.
//!
//! Scalars are represented as shape `[1]`; every tensor has a non-empty
//! shape with extents `>= 1`.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{GcnError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating-point element type of a [`Tensor`].
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + 'static
{
    const DTYPE: DType;

    /// `c = alpha * a * b + beta * c` for row-major operands with explicit strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-aliasing (for `c`) buffers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f32 {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f64 {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

/// Safe GEMM over row-major slices: `c = a' * b' + beta * c`, where `a'` is
/// `a` (`[m, k]`) or its transpose (`a` stored `[k, m]`), likewise for `b'`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; `c` is a unique borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// Initialization scheme for [`Tensor::create`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    Uniform { lo: f64, hi: f64 },
    Gaussian { mean: f64, std: f64 },
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(GcnError::shape("shape must have at least one extent"));
    }
    if let Some(pos) = shape.iter().position(|&e| e == 0) {
        return Err(GcnError::shape(format!(
            "extent {pos} of {shape:?} is zero"
        )));
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(GcnError::shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: T) -> Result<Self> {
        let shape = shape.into();
        let n = check_shape(&shape)?;
        Ok(Tensor {
            shape,
            data: vec![v; n],
        })
    }

    pub fn zeros_like(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: vec![T::zero(); self.data.len()],
        }
    }

    pub fn eye(n: usize) -> Result<Self> {
        let mut t = Self::zeros([n, n])?;
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        Ok(t)
    }

    /// Build a tensor with the given initializer. Random initializers
    /// consume `rng` in row-major order.
    pub fn create(shape: impl Into<Vec<usize>>, init: Init, rng: &mut RngState) -> Result<Self> {
        let shape = shape.into();
        let n = check_shape(&shape)?;
        let data = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Constant(c) => vec![T::lit(c); n],
            Init::Uniform { lo, hi } => {
                if !(lo < hi) {
                    return Err(GcnError::Contract(format!(
                        "uniform init needs lo < hi, got [{lo}, {hi})"
                    )));
                }
                (0..n).map(|_| T::lit(rng.uniform(lo, hi))).collect()
            }
            Init::Gaussian { mean, std } => {
                if !(std > 0.0) {
                    return Err(GcnError::Contract(format!(
                        "gaussian init needs sigma > 0, got {std}"
                    )));
                }
                (0..n).map(|_| T::lit(rng.gaussian(mean, std))).collect()
            }
        };
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// The single element of a `[1]` tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n = check_shape(&shape)?;
        if n != self.data.len() {
            return Err(GcnError::shape(format!(
                "cannot reshape {:?} ({} elements) into {shape:?} ({n} elements)",
                self.shape,
                self.data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        self.expect_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, c: T) {
        for v in &mut self.data {
            *v = *v * c;
        }
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn dot(&self, other: &Tensor<T>) -> Result<T> {
        self.expect_same_shape(other, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b))
    }

    pub fn squared_distance(&self, other: &Tensor<T>) -> Result<T> {
        self.expect_same_shape(other, "squared_distance")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b)))
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row `i` of the leading axis as a new tensor with the remaining shape.
    pub fn index_axis0(&self, i: usize) -> Result<Self> {
        if self.shape.len() < 2 || i >= self.shape[0] {
            return Err(GcnError::shape(format!(
                "cannot take row {i} of {:?}",
                self.shape
            )));
        }
        let inner: usize = self.shape[1..].iter().product();
        Ok(Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
        })
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| GcnError::shape("cannot stack zero tensors"))?;
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            first.expect_same_shape(p, "stack")?;
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }

    pub(crate) fn expect_same_shape(&self, other: &Tensor<T>, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(GcnError::shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }
}

/// Rank-2 matrix product `[m, k] x [k, n] -> [m, n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(GcnError::shape(format!(
            "matmul needs [m,k] x [k,n], got {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![T::zero(); m * n];
    gemm(false, false, m, k, n, &a.data, &b.data, T::zero(), &mut out);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Deterministic random stream: ChaCha8 seeded from a 64-bit seed, with
/// independent sub-streams derived through [`RngState::fork`].
#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    inner: ChaCha8Rng,
}

impl RngState {
    pub const ALGORITHM: &'static str = "chacha8";

    pub fn new(seed: u64) -> Self {
        RngState {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// A fresh stream determined only by `(self.seed, stream)`.
    pub fn fork(&self, stream: u64) -> RngState {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream);
        RngState {
            seed: self.seed,
            inner,
        }
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    pub fn gaussian(&mut self, mean: f64, std: f64) -> f64 {
        let z: f64 = self.inner.sample(StandardNormal);
        mean + std * z
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<V>(&mut self, items: &mut [V]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn create_zero_and_constant() {
        let mut rng = RngState::new(0);
        let z = Tensor::<f64>::create([2, 2], Init::Zeros, &mut rng).unwrap();
        assert_eq!(z.data(), &[0.0; 4]);
        let c = Tensor::<f64>::create([3], Init::Constant(1.5), &mut rng).unwrap();
        assert_eq!(c.data(), &[1.5, 1.5, 1.5]);
    }

    #[test]
    fn uniform_is_reproducible() {
        let init = Init::Uniform { lo: 0.0, hi: 1.0 };
        let a = Tensor::<f32>::create([4], init, &mut RngState::new(42)).unwrap();
        let b = Tensor::<f32>::create([4], init, &mut RngState::new(42)).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&v| (0.0..1.0).contains(&v)));
    }

    #[test]
    fn create_rejects_bad_arguments() {
        let mut rng = RngState::new(1);
        assert!(matches!(
            Tensor::<f32>::create([2, 0], Init::Zeros, &mut rng),
            Err(GcnError::Shape(_))
        ));
        assert!(Tensor::<f32>::create([2], Init::Uniform { lo: 1.0, hi: 1.0 }, &mut rng).is_err());
        assert!(
            Tensor::<f32>::create([2], Init::Gaussian { mean: 0.0, std: 0.0 }, &mut rng).is_err()
        );
        assert!(Tensor::<f32>::new(Vec::<usize>::new(), vec![]).is_err());
    }

    #[test]
    fn matmul_hand_cases() {
        let i = Tensor::<f64>::eye(2).unwrap();
        let m = Tensor::from_f64([2, 2], &[1., 2., 3., 4.]).unwrap();
        assert_eq!(matmul(&i, &m).unwrap(), m);
        let a = Tensor::<f64>::from_f64([1, 2], &[1., 2.]).unwrap();
        let b = Tensor::from_f64([2, 1], &[3., 4.]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
        assert!(matmul(&a, &a).is_err());
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = RngState::new(7);
        let g = Init::Gaussian { mean: 0.0, std: 1.0 };
        let a = Tensor::<f64>::create([5, 7], g, &mut rng).unwrap();
        let b = Tensor::<f64>::create([7, 3], g, &mut rng).unwrap();
        let c = matmul(&a, &b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..7 {
                    s += a.data()[i * 7 + k] * b.data()[k * 3 + j];
                }
                assert!((c.data()[i * 3 + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transposed_gemm_variants() {
        // a^T b with a stored [k, m]
        let a = [1.0f64, 2., 3., 4., 5., 6.]; // [3,2]
        let b = [1.0f64, 0., 0., 1., 1., 1.]; // [3,2]
        let mut c = [0.0f64; 4];
        gemm(true, false, 2, 3, 2, &a, &b, 0.0, &mut c);
        assert_eq!(c, [1. + 5., 3. + 5., 2. + 6., 4. + 6.]);
        let mut d = [0.0f64; 9];
        gemm(false, true, 3, 2, 3, &a, &b, 0.0, &mut d);
        assert_eq!(d[0..3], [1.0, 2.0, 3.0]);
    }

    #[test]
    fn fork_streams_are_independent_and_stable() {
        let base = RngState::new(9);
        let mut a = base.fork(1);
        let mut b = base.fork(1);
        let mut c = base.fork(2);
        let (x, y, z) = (a.next_u64(), b.next_u64(), c.next_u64());
        assert_eq!(x, y);
        assert_ne!(x, z);
    }
}
