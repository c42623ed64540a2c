//! Dense row-major tensors with shape-checked products and axis-wise softmax.
//!
//! Every reduction runs in a fixed left-to-right order over the contracted
//! index, so a product computed here is bit-identical to the naive triple
//! loop that accumulates `a[i][p] * b[p][j]` for `p = 0, 1, ...`.

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::cost;
use crate::error::{Error, Result};

/// Elements of a product operand kept hot while the other operand streams.
const PANEL: usize = 8192;

/// Floating-point element type. `f64` is used for verification and
/// gradient checks, `f32` for benchmarks and desk training.
pub trait Real:
    Float
    + Default
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// Softmax normalization direction for a `rows x cols` matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Each row sums to one (normalizes over the column index).
    Rows,
    /// Each column sums to one (normalizes over the row index).
    Columns,
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T: Real = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor<{}>{:?}", T::NAME, self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::Config(format!("tensor extents must be positive, got {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = check_shape(shape).expect("zeros: invalid shape");
        cost::record_alloc(n);
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[1, 1], value)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// Wraps `data` as a tensor; the length must match the shape and every
    /// value must be finite.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n = check_shape(shape)?;
        if data.len() != n {
            return Err(Error::dims("from_vec", shape, &[data.len()]));
        }
        cost::record_alloc(n);
        let t = Tensor {
            shape: shape.to_vec(),
            data,
        };
        t.ensure_finite("from_vec")?;
        Ok(t)
    }

    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Config("ragged rows".into()));
        }
        Self::from_vec(&[rows.len(), cols], rows.concat())
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let n = check_shape(shape)?;
        Self::from_vec(shape, (0..n).map(&mut f).collect())
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

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of all trailing extents; the column count of a matrix.
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
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

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        let cols = self.cols();
        self.data[i * cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::dims("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    fn finite(self, op: &'static str) -> Result<Self> {
        self.ensure_finite(op)?;
        Ok(self)
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff: shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs()))
    }

    pub fn transpose(&self) -> Tensor<T> {
        let (m, n) = (self.rows(), self.cols());
        let mut out = Tensor::zeros(&[n, m]);
        for i in 0..m {
            for j in 0..n {
                out.data[j * m + i] = self.data[i * n + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        let mut out = Tensor::zeros(&self.shape);
        for (o, v) in out.data.iter_mut().zip(&self.data) {
            *o = f(*v);
        }
        out
    }

    fn zip_with(&self, other: &Tensor<T>, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape != other.shape {
            return Err(Error::dims(op, &self.shape, &other.shape));
        }
        let mut out = Tensor::zeros(&self.shape);
        for ((o, a), b) in out.data.iter_mut().zip(&self.data).zip(&other.data) {
            *o = f(*a, *b);
        }
        out.finite(op)
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    /// In-place `self += other`, used for gradient accumulation.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dims("add_assign", &self.shape, &other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        self.ensure_finite("add_assign")
    }

    pub fn scale(&self, s: T) -> Result<Tensor<T>> {
        self.map(|v| v * s).finite("scale")
    }

    /// Adds a `1 x cols` row vector to every row.
    pub fn add_row(&self, row: &Tensor<T>) -> Result<Tensor<T>> {
        let mut out = self.clone();
        cost::record_alloc(out.len());
        out.add_row_in_place(row)?;
        Ok(out)
    }

    pub fn add_row_in_place(&mut self, row: &Tensor<T>) -> Result<()> {
        let n = self.cols();
        if row.shape() != [1, n] {
            return Err(Error::dims("add_row", &self.shape, &row.shape));
        }
        for chunk in self.data.chunks_exact_mut(n) {
            for (a, b) in chunk.iter_mut().zip(&row.data) {
                *a += *b;
            }
        }
        self.ensure_finite("add_row")
    }

    /// Multiplies row `i` by `v[i]`, where `v` holds one value per row.
    pub fn scale_rows(&self, v: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, n) = (self.rows(), self.cols());
        if v.shape() != [m, 1] {
            return Err(Error::dims("scale_rows", &self.shape, &v.shape));
        }
        let mut out = Tensor::zeros(&self.shape);
        for i in 0..m {
            let s = v.data[i];
            for j in 0..n {
                out.data[i * n + j] = self.data[i * n + j] * s;
            }
        }
        out.finite("scale_rows")
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.map(sigmoid)
    }

    pub fn abs(&self) -> Tensor<T> {
        self.map(|v| v.abs())
    }

    pub fn leaky_relu(&self, slope: T) -> Tensor<T> {
        self.map(|v| if v > T::zero() { v } else { v * slope })
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, v| acc + *v)
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_f64(self.data.len() as f64)
    }

    /// Sum of each row, as a `rows x 1` tensor.
    pub fn row_sums(&self) -> Tensor<T> {
        let n = self.cols();
        let mut out = Tensor::zeros(&[self.rows(), 1]);
        for (o, chunk) in out.data.iter_mut().zip(self.data.chunks_exact(n)) {
            *o = chunk.iter().fold(T::zero(), |acc, v| acc + *v);
        }
        out
    }

    /// Sum of each column, as a `1 x cols` tensor.
    pub fn col_sums(&self) -> Tensor<T> {
        let n = self.cols();
        let mut out = Tensor::zeros(&[1, n]);
        for chunk in self.data.chunks_exact(n) {
            for (o, v) in out.data.iter_mut().zip(chunk) {
                *o += *v;
            }
        }
        out
    }

    pub fn softmax(&self, axis: Axis) -> Result<Tensor<T>> {
        let mut out = self.clone();
        cost::record_alloc(out.len());
        out.softmax_in_place(axis)?;
        Ok(out)
    }

    /// Numerically stable softmax with max subtraction, overwriting `self`.
    pub fn softmax_in_place(&mut self, axis: Axis) -> Result<()> {
        self.ensure_finite("softmax")?;
        let (m, n) = (self.rows(), self.cols());
        match axis {
            Axis::Rows => {
                for chunk in self.data.chunks_exact_mut(n) {
                    let max = chunk.iter().fold(T::neg_infinity(), |a, v| a.max(*v));
                    let mut total = T::zero();
                    for v in chunk.iter_mut() {
                        *v = (*v - max).exp();
                        total += *v;
                    }
                    for v in chunk.iter_mut() {
                        *v = *v / total;
                    }
                }
            }
            Axis::Columns => {
                let mut max = vec![T::neg_infinity(); n];
                for chunk in self.data.chunks_exact(n) {
                    for (mx, v) in max.iter_mut().zip(chunk) {
                        *mx = mx.max(*v);
                    }
                }
                let mut total = vec![T::zero(); n];
                for i in 0..m {
                    let chunk = &mut self.data[i * n..(i + 1) * n];
                    for ((v, mx), t) in chunk.iter_mut().zip(&max).zip(total.iter_mut()) {
                        *v = (*v - *mx).exp();
                        *t += *v;
                    }
                }
                for chunk in self.data.chunks_exact_mut(n) {
                    for (v, t) in chunk.iter_mut().zip(&total) {
                        *v = *v / *t;
                    }
                }
            }
        }
        self.ensure_finite("softmax")
    }

    /// `self (m x n) . other (n x p)`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, n) = (self.rows(), self.cols());
        let (n2, p) = (other.rows(), other.cols());
        if n != n2 {
            return Err(Error::dims("matmul", &self.shape, &other.shape));
        }
        cost::record_macs(m * n * p);
        let mut out = Tensor::zeros(&[m, p]);
        let b = &other.data;
        // blocks of B rows stay cached across all rows of A; every output
        // still accumulates in ascending q
        let block = (PANEL / p.max(1)).max(1);
        for q0 in (0..n).step_by(block) {
            let q1 = (q0 + block).min(n);
            for (arow, crow) in self.data.chunks_exact(n).zip(out.data.chunks_exact_mut(p)) {
                for (q, &a) in arow[q0..q1].iter().enumerate() {
                    let q = q0 + q;
                    let brow = &b[q * p..(q + 1) * p];
                    for (c, &bv) in crow.iter_mut().zip(brow) {
                        *c += a * bv;
                    }
                }
            }
        }
        out.finite("matmul")
    }

    /// `self (m x c) . other^T` where `other` is `n x c`; never forms the
    /// transpose.
    pub fn matmul_nt(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, c) = (self.rows(), self.cols());
        let (n, c2) = (other.rows(), other.cols());
        if c != c2 {
            return Err(Error::dims("matmul_nt", &self.shape, &other.shape));
        }
        cost::record_macs(m * n * c);
        let mut out = Tensor::zeros(&[m, n]);
        let b = &other.data;
        let block = (PANEL / c.max(1)).max(4);
        for j0 in (0..n).step_by(block) {
            let j1 = (j0 + block).min(n);
            for (arow, crow) in self.data.chunks_exact(c).zip(out.data.chunks_exact_mut(n)) {
                let mut j = j0;
                // four independent accumulators, each summed in ascending p
                while j + 4 <= j1 {
                    let (b0, b1, b2, b3) = (
                        &b[j * c..(j + 1) * c],
                        &b[(j + 1) * c..(j + 2) * c],
                        &b[(j + 2) * c..(j + 3) * c],
                        &b[(j + 3) * c..(j + 4) * c],
                    );
                    let (mut s0, mut s1, mut s2, mut s3) = (T::zero(), T::zero(), T::zero(), T::zero());
                    for p in 0..c {
                        let a = arow[p];
                        s0 += a * b0[p];
                        s1 += a * b1[p];
                        s2 += a * b2[p];
                        s3 += a * b3[p];
                    }
                    crow[j] = s0;
                    crow[j + 1] = s1;
                    crow[j + 2] = s2;
                    crow[j + 3] = s3;
                    j += 4;
                }
                while j < j1 {
                    let brow = &b[j * c..(j + 1) * c];
                    let mut s = T::zero();
                    for p in 0..c {
                        s += arow[p] * brow[p];
                    }
                    crow[j] = s;
                    j += 1;
                }
            }
        }
        out.finite("matmul_nt")
    }

    /// `self^T . other` where `self` is `k x m` and `other` is `k x p`.
    pub fn matmul_tn(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (k, m) = (self.rows(), self.cols());
        let (k2, p) = (other.rows(), other.cols());
        if k != k2 {
            return Err(Error::dims("matmul_tn", &self.shape, &other.shape));
        }
        cost::record_macs(m * k * p);
        let mut out = Tensor::zeros(&[m, p]);
        // output rows in cache-sized blocks, each swept once per q
        let block = (PANEL / p.max(1)).max(1);
        for i0 in (0..m).step_by(block) {
            let i1 = (i0 + block).min(m);
            let out_block = &mut out.data[i0 * p..i1 * p];
            for q in 0..k {
                let arow = &self.data[q * m + i0..q * m + i1];
                let brow = &other.data[q * p..(q + 1) * p];
                for (&a, crow) in arow.iter().zip(out_block.chunks_exact_mut(p)) {
                    for (c, &bv) in crow.iter_mut().zip(brow) {
                        *c += a * bv;
                    }
                }
            }
        }
        out.finite("matmul_tn")
    }
}

pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, n, p) = (a.rows(), a.cols(), b.cols());
        let mut out = Tensor::zeros(&[m, p]);
        for i in 0..m {
            for j in 0..p {
                let mut s = 0.0;
                for q in 0..n {
                    s += a.get(i, q) * b.get(q, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn identity_product() {
        let m = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(Tensor::eye(2).matmul(&m).unwrap(), m);
    }

    #[test]
    fn permutation_product() {
        let p = Tensor::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]).unwrap();
        let m = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let expect = Tensor::from_rows(&[&[3.0, 4.0], &[1.0, 2.0]]).unwrap();
        assert_eq!(p.matmul(&m).unwrap(), expect);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[4, 5]);
        let got = a.matmul(&b).unwrap();
        assert!(got.max_abs_diff(&naive_matmul(&a, &b)) <= 1e-12);
        // same summation order, so in fact bit-identical
        assert_eq!(got, naive_matmul(&a, &b));
    }

    #[test]
    fn transposed_variants_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&mut rng, &[7, 5]);
        let b = random(&mut rng, &[9, 5]);
        let nt = a.matmul_nt(&b).unwrap();
        assert_eq!(nt, naive_matmul(&a, &b.transpose()));
        let c = random(&mut rng, &[7, 3]);
        let tn = a.matmul_tn(&c).unwrap();
        assert_eq!(tn, naive_matmul(&a.transpose(), &c));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn softmax_examples() {
        let t = Tensor::from_rows(&[&[0.0, 0.0, 0.0]]).unwrap();
        let s = t.softmax(Axis::Rows).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let e = std::f64::consts::E;
        let s = Tensor::from_rows(&[&[1.0, 0.0]]).unwrap().softmax(Axis::Rows).unwrap();
        assert!((s.get(0, 0) - e / (e + 1.0)).abs() < 1e-15);
        assert!((s.get(0, 0) - 0.7311).abs() < 1e-4);
        assert!((s.get(0, 1) - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn softmax_survives_large_logits() {
        let t = Tensor::from_rows(&[&[1000.0, 0.0], &[999.0, -1000.0]]).unwrap();
        let s = t.softmax(Axis::Columns).unwrap();
        assert!(s.is_finite());
        let sums = s.col_sums();
        for v in sums.data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_input_rejected() {
        let t = Tensor {
            shape: vec![1, 2],
            data: vec![f64::NAN, 0.0],
        };
        assert!(matches!(t.softmax(Axis::Rows), Err(Error::NonFinite { .. })));
        assert!(Tensor::from_vec(&[1, 1], vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn elementwise_basics() {
        assert_eq!(Tensor::scalar(-3.0).abs().item(), 3.0);
        assert_eq!(Tensor::scalar(0.0).sigmoid().item(), 0.5);
        assert_eq!(Tensor::from_rows(&[&[1.0, 2.0, 3.0]]).unwrap().mean(), 2.0);
        let m = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let v = Tensor::from_vec(&[2, 1], vec![2.0, -1.0]).unwrap();
        let r = m.scale_rows(&v).unwrap();
        assert_eq!(r.data(), &[2.0, 4.0, -3.0, -4.0]);
        let b = Tensor::from_vec(&[1, 2], vec![10.0, 20.0]).unwrap();
        assert_eq!(m.add_row(&b).unwrap().data(), &[11.0, 22.0, 13.0, 24.0]);
        assert!(m.add(&Tensor::zeros(&[1, 2])).is_err());
        assert!(m.scale_rows(&b.reshape(&[2, 1]).unwrap().transpose()).is_err());
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(-800.0f64), 0.0);
        assert_eq!(sigmoid(800.0f64), 1.0);
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(Tensor::<f64>::from_vec(&[0, 3], vec![]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_normalizes_and_is_shift_invariant(
            seed in 0u64..1000, rows in 1usize..6, cols in 1usize..9, shift in -50.0f64..50.0
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::from_fn(&[rows, cols], |_| rng.random_range(-8.0..8.0)).unwrap();
            for axis in [Axis::Rows, Axis::Columns] {
                let s = x.softmax(axis).unwrap();
                let sums = if axis == Axis::Rows { s.row_sums() } else { s.col_sums() };
                for v in sums.data() {
                    prop_assert!((v - 1.0).abs() <= 1e-12);
                }
                prop_assert!(s.data().iter().all(|v| *v >= 0.0));
                let shifted = x.map(|v| v + shift).softmax(axis).unwrap();
                prop_assert!(s.max_abs_diff(&shifted) <= 1e-12);
            }
        }

        #[test]
        fn matmul_is_associative(seed in 0u64..1000, m in 1usize..6, n in 1usize..6, p in 1usize..6, q in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&mut rng, &[m, n]);
            let b = random(&mut rng, &[n, p]);
            let c = random(&mut rng, &[p, q]);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let scale = left.data().iter().fold(1.0f64, |s, v| s.max(v.abs()));
            prop_assert!(left.max_abs_diff(&right) <= 1e-9 * scale);
        }

        #[test]
        fn repeated_runs_are_bit_identical(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&mut rng, &[5, 8]);
            let b = random(&mut rng, &[8, 3]);
            prop_assert_eq!(a.matmul(&b).unwrap(), a.matmul(&b).unwrap());
        }
    }
}
