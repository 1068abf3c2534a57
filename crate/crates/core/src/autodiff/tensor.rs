use std::ops::{Add, Mul, Sub};

use crate::error::{invalid, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor.
///
/// Invariant: `shape.iter().product() == data.len()`. Most of the crate uses
/// rank-2 tensors shaped `[rows, cols]` where rows index samples in a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(invalid(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Rank-1 tensor of length one.
    pub fn scalar(value: S) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a `[rows.len(), N]` tensor from fixed-width rows.
    pub fn from_rows<const N: usize>(rows: &[[S; N]]) -> Self {
        Self {
            shape: vec![rows.len(), N],
            data: rows.iter().flatten().copied().collect(),
        }
    }

    /// `[n, 1]` column tensor.
    pub fn column(values: Vec<S>) -> Self {
        Self {
            shape: vec![values.len(), 1],
            data: values,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension (1 for rank-0/1 tensors of a single element).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[0],
        }
    }

    /// Trailing extent when viewed as `[rows, cols]`.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.data.len() / self.shape[0].max(1),
        }
    }

    pub fn row(&self, i: usize) -> &[S] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(invalid(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn scale(&self, c: S) -> Self {
        self.map(|x| x * c)
    }

    /// `self += c * other`.
    pub fn axpy(&mut self, c: S, other: &Self) {
        assert_eq!(self.shape, other.shape, "axpy shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    /// Multiplies row `i` by `col[i]`; `col` must be `[rows, 1]` (or a flat
    /// vector of length `rows`).
    pub fn scale_rows(&self, col: &Self) -> Self {
        assert_eq!(col.len(), self.rows(), "scale_rows length mismatch");
        let c = self.cols();
        let mut out = self.clone();
        for (i, chunk) in out.data.chunks_mut(c.max(1)).enumerate() {
            let s = col.data[i];
            for v in chunk {
                *v *= s;
            }
        }
        out
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Self) -> S {
        assert_eq!(self.len(), other.len(), "dot length mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> S {
        self.dot(self).sqrt()
    }

    pub fn max_abs(&self) -> S {
        self.data
            .iter()
            .fold(S::zero(), |m, &x| if x.abs() > m { x.abs() } else { m })
    }

    pub fn max_abs_diff(&self, other: &Self) -> S {
        assert_eq!(self.len(), other.len(), "max_abs_diff length mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(S::zero(), |m, (&a, &b)| {
                let d = (a - b).abs();
                if d > m || d.is_nan() {
                    d
                } else {
                    m
                }
            })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| T::lit(x.as_f64())).collect(),
        }
    }
}

impl<S: Scalar> Add for &Tensor<S> {
    type Output = Tensor<S>;
    fn add(self, rhs: Self) -> Tensor<S> {
        self.zip_map(rhs, |a, b| a + b)
    }
}

impl<S: Scalar> Sub for &Tensor<S> {
    type Output = Tensor<S>;
    fn sub(self, rhs: Self) -> Tensor<S> {
        self.zip_map(rhs, |a, b| a - b)
    }
}

impl<S: Scalar> Mul for &Tensor<S> {
    type Output = Tensor<S>;
    fn mul(self, rhs: Self) -> Tensor<S> {
        self.zip_map(rhs, |a, b| a * b)
    }
}

/// A value paired with its directional derivative.
#[derive(Clone, Debug, PartialEq)]
pub struct DualTensor<S> {
    pub primal: Tensor<S>,
    pub tangent: Tensor<S>,
}

impl<S: Scalar> DualTensor<S> {
    pub fn new(primal: Tensor<S>, tangent: Tensor<S>) -> Result<Self> {
        if primal.shape() != tangent.shape() {
            return Err(invalid(format!(
                "primal shape {:?} differs from tangent shape {:?}",
                primal.shape(),
                tangent.shape()
            )));
        }
        Ok(Self { primal, tangent })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn rows_and_cols() {
        let t = Tensor::<f64>::zeros(&[4, 3]);
        assert_eq!((t.rows(), t.cols()), (4, 3));
        let s = Tensor::scalar(1.0f64);
        assert_eq!((s.rows(), s.cols()), (1, 1));
    }

    #[test]
    fn scale_rows_by_column() {
        let t = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let c = Tensor::column(vec![2.0, -1.0]);
        assert_eq!(t.scale_rows(&c).data(), &[2.0, 4.0, -3.0, -4.0]);
    }

    #[test]
    fn dual_requires_matching_shapes() {
        let a = Tensor::<f64>::zeros(&[2]);
        let b = Tensor::<f64>::zeros(&[3]);
        assert!(DualTensor::new(a.clone(), b).is_err());
        assert!(DualTensor::new(a.clone(), a).is_ok());
    }
}
