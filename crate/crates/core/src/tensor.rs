//! Dense row-major tensors of rank 0, 1 or 2.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Order of an Lp norm. Only the three orders used by the uncertainty sets
/// are supported.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Norm {
    #[serde(rename = "1")]
    L1,
    #[serde(rename = "2")]
    L2,
    #[serde(rename = "inf")]
    Inf,
}

impl Norm {
    /// The dual order `q` with `1/p + 1/q = 1`.
    pub fn dual(self) -> Norm {
        match self {
            Norm::L1 => Norm::Inf,
            Norm::L2 => Norm::L2,
            Norm::Inf => Norm::L1,
        }
    }

    pub fn of<T: Real>(self, v: &[T]) -> T {
        match self {
            Norm::L1 => v.iter().map(|x| x.abs()).sum(),
            Norm::L2 => v.iter().map(|x| *x * *x).sum::<T>().sqrt(),
            Norm::Inf => v.iter().fold(T::zero(), |m, x| m.max(x.abs())),
        }
    }

    pub const ALL: [Norm; 3] = [Norm::L1, Norm::L2, Norm::Inf];
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Norm::L1 => "1",
            Norm::L2 => "2",
            Norm::Inf => "inf",
        })
    }
}

impl FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "1" | "l1" => Ok(Norm::L1),
            "2" | "l2" => Ok(Norm::L2),
            "inf" | "linf" | "infinity" => Ok(Norm::Inf),
            other => Err(Error::UnsupportedNorm(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.len() > 2 {
            return Err(Error::InvalidShape(shape, "rank above 2"));
        }
        if shape.contains(&0) {
            return Err(Error::InvalidShape(shape, "zero extent"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidShape(shape, "data length differs from extent product"));
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    /// A vector. Panics on an empty slice.
    pub fn vector(data: Vec<T>) -> Self {
        assert!(!data.is_empty(), "empty vector");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::InvalidShape(vec![r, c], "ragged rows"));
        }
        Self::matrix(r, c, rows.concat())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Column count; vectors count as a single column.
    pub fn cols(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows()).map(|i| self.at(i, j)).collect()
    }

    /// The single value of a scalar or length-one tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.same_shape(other, op)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn relu(&self) -> Self {
        self.map(Real::pos)
    }

    pub fn neg(&self) -> Self {
        self.map(|x| -x)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|x| x * c)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "hadamard", |a, b| a * b)
    }

    /// `self += c * other`.
    pub fn axpy(&mut self, c: T, other: &Self) -> Result<()> {
        self.same_shape(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + c * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn transpose(&self) -> Self {
        if self.rank() < 2 {
            return Self {
                shape: vec![1, self.len()],
                data: self.data.clone(),
            };
        }
        let (r, c) = (self.rows(), self.cols());
        let mut data = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                data.push(self.data[i * c + j]);
            }
        }
        Self {
            shape: vec![c, r],
            data,
        }
    }

    /// Matrix product. `rhs` may be a matrix or a vector; a vector right-hand
    /// side yields a vector.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.rank() != 2 || rhs.rank() == 0 || rhs.rows() != self.cols() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let (m, n) = (self.rows(), self.cols());
        let p = rhs.cols();
        let mut out = vec![T::zero(); m * p];
        for i in 0..m {
            let orow = &mut out[i * p..(i + 1) * p];
            for k in 0..n {
                let a = self.data[i * n + k];
                if a == T::zero() {
                    continue;
                }
                let brow = &rhs.data[k * p..(k + 1) * p];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o = *o + a * b;
                }
            }
        }
        let shape = if rhs.rank() == 1 { vec![m] } else { vec![m, p] };
        Ok(Self { shape, data: out })
    }

    /// Index of the largest entry; lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.data)
    }

    pub fn lp_norm(&self, p: Norm) -> Result<T> {
        if self.rank() != 1 {
            return Err(Error::InvalidShape(self.shape.clone(), "norm of a non-vector"));
        }
        Ok(p.of(&self.data))
    }

    pub fn logsumexp(&self) -> T {
        logsumexp(&self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::lit(x.as_f64())).collect(),
        }
    }
}

/// Index of the largest entry; lowest index on ties.
pub fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `log Σ exp(z_k)` with max shift.
pub fn logsumexp<T: Real>(z: &[T]) -> T {
    let m = z.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    if !m.is_finite() {
        return m;
    }
    m + z.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}

pub fn softmax<T: Real>(z: &[T]) -> Vec<T> {
    let m = z.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let e: Vec<T> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn relu<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    t.relu()
}

pub fn lp_norm<T: Real>(t: &Tensor<T>, p: Norm) -> Result<T> {
    t.lp_norm(p)
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn relu_examples() {
        let t = Tensor::vector(vec![-1.0, 2.0, 0.0]);
        assert_eq!(relu(&t).data(), &[0.0, 2.0, 0.0]);
        let neg = Tensor::vector(vec![-3.0, -0.5]);
        assert_eq!(relu(&neg).data(), &[0.0, 0.0]);
    }

    #[test]
    fn norms() {
        let v = Tensor::vector(vec![3.0, 4.0]);
        assert_eq!(v.lp_norm(Norm::L2).unwrap(), 5.0);
        let w = Tensor::vector(vec![1.0, -2.0, 3.0]);
        assert_eq!(w.lp_norm(Norm::L1).unwrap(), 6.0);
        assert_eq!(w.lp_norm(Norm::Inf).unwrap(), 3.0);
        assert!("3".parse::<Norm>().is_err());
        assert_eq!("inf".parse::<Norm>().unwrap(), Norm::Inf);
        assert_eq!(Norm::L1.dual(), Norm::Inf);
        assert_eq!(Norm::Inf.dual(), Norm::L1);
        assert_eq!(Norm::L2.dual(), Norm::L2);
    }

    #[test]
    fn logsumexp_examples() {
        assert!((logsumexp(&[0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
        let big = logsumexp(&[1000.0, 1000.0]);
        assert!((big - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn logsumexp_matches_naive_sum() {
        // Naive evaluation with values kept small enough that plain exp/ln is exact to
        // double rounding.
        let z = [0.3, -1.2, 2.5, 0.0, -0.7];
        let naive = z.iter().map(|v: &f64| v.exp()).sum::<f64>().ln();
        assert!((logsumexp(&z) - naive).abs() < 1e-14);
    }

    #[test]
    fn matmul_identity_and_shapes() {
        let x = Tensor::vector(vec![1.0, -2.0, 0.5]);
        assert_eq!(Tensor::identity(3).matmul(&x).unwrap(), x);
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::matrix(3, 1, vec![1.0, 0.0, -1.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[-2.0, -2.0]);
        assert!(a.matmul(&a).is_err());
        assert_eq!(a.transpose().shape(), &[3, 2]);
        assert_eq!(a.transpose().at(2, 1), 6.0);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f64>::new(vec![0], vec![]).is_err());
    }

    proptest! {
        #[test]
        fn relu_idempotent(v in prop::collection::vec(-10.0f64..10.0, 1..20)) {
            let t = Tensor::vector(v);
            prop_assert_eq!(t.relu().relu(), t.relu());
        }

        #[test]
        fn logsumexp_shift(v in prop::collection::vec(-50.0f64..50.0, 1..10), c in -1e3f64..1e3) {
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            prop_assert!((logsumexp(&shifted) - (logsumexp(&v) + c)).abs() < 1e-12);
        }
    }
}
