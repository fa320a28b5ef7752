//! Dense row-major `f64` tensors.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::exec::{gemm, Exec, MatRef};

/// Dense tensor of 64-bit reals; `shape.iter().product() == data.len()`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// `rows x cols` matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Standard-normal entries drawn from `rng`.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        t.data
            .iter_mut()
            .for_each(|v| *v = rng.sample::<f64, _>(StandardNormal));
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension (1 for a scalar).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Product of all trailing dimensions.
    pub fn cols(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub(crate) fn check_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub(crate) fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(op))
        }
    }

    /// Elementwise map into a tensor of the same shape.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two equally shaped tensors.
    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check_same_shape(other, op)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)?.ensure_finite("add")
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)?.ensure_finite("sub")
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "mul", |a, b| a * b)?.ensure_finite("mul")
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    /// Multiplies row `i` by `factors[i]`.
    pub fn scale_rows(&self, factors: &[f64]) -> Result<Tensor> {
        if factors.len() != self.rows() {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                left: self.shape.clone(),
                right: vec![factors.len()],
            });
        }
        let c = self.cols();
        let mut out = self.clone();
        for (row, &f) in out.data.chunks_mut(c.max(1)).zip(factors) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        Ok(out)
    }

    /// `A·B` for 2-D tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let data = gemm(
            Exec::default(),
            MatRef::new(&self.data, m, k),
            MatRef::new(&other.data, k, n),
        );
        Tensor::matrix(m, n, data)?.ensure_finite("matmul")
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Mean of squared differences.
    pub fn mse(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other, "mse")?;
        let n = self.data.len() as f64;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Euclidean norm of the flattened tensor.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Stacks tensors with equal trailing shape along the leading axis.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_rows of zero tensors"))?;
        let tail = first.shape[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape[1..] != tail[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: first.shape.clone(),
                    right: p.shape.clone(),
                });
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        Tensor::new(shape, data)
    }

    /// Rows `start..start + len` of the leading axis.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        if start + len > self.rows() {
            return Err(Error::invalid(format!(
                "slice_rows {start}..{} of {} rows",
                start + len,
                self.rows()
            )));
        }
        let c = self.cols();
        let mut shape = self.shape.clone();
        shape[0] = len;
        Tensor::new(shape, self.data[start * c..(start + len) * c].to_vec())
    }

    /// Builds a tensor by picking rows by index.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= self.rows() {
                return Err(Error::invalid(format!("row {i} out of {}", self.rows())));
            }
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            shape.push(idx.len());
        } else {
            shape[0] = idx.len();
        }
        Tensor::new(shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matmul_identity_left() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::randn(vec![3, 5], &mut rng);
        assert_eq!(Tensor::eye(3).matmul(&a).unwrap(), a);
    }

    #[test]
    fn mse_cases() {
        let x = Tensor::new(vec![2], vec![0.3, -1.0]).unwrap();
        assert_eq!(x.mse(&x).unwrap(), 0.0);
        let z = Tensor::zeros(vec![2]);
        let o = Tensor::full(vec![2], 1.0);
        assert_eq!(z.mse(&o).unwrap(), 1.0);
    }

    #[test]
    fn shape_errors_are_typed() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::ShapeMismatch { op: "matmul", .. })));
        assert!(matches!(
            a.add(&Tensor::zeros(vec![3, 2])),
            Err(Error::ShapeMismatch { op: "add", .. })
        ));
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn non_finite_results_are_rejected() {
        let a = Tensor::full(vec![1], f64::MAX);
        assert!(matches!(a.add(&a), Err(Error::NonFinite("add"))));
    }

    #[test]
    fn gather_and_slice() {
        let t = Tensor::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(t.gather_rows(&[2, 0]).unwrap().data(), &[5., 6., 1., 2.]);
        assert_eq!(t.slice_rows(1, 2).unwrap().data(), &[3., 4., 5., 6.]);
        assert!(t.slice_rows(2, 2).is_err());
    }
}
