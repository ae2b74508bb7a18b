//! Dense row-major `f64` tensors.
//!
//! Every fallible operation checks shapes at the boundary and refuses to
//! return non-finite values, so a NaN produced deep inside a computation
//! surfaces as an [`Error`] at the op that created it.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= SHOWN {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}..", &self.data[..SHOWN])
        }
    }
}

impl Tensor {
    /// Builds a tensor, rejecting length mismatches and non-finite entries.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {expected} elements, got {}", data.len()),
            ));
        }
        Tensor { shape, data }.finite("tensor")
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new([data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new([rows, cols], data)
    }

    /// Stacks equally sized rows into a `[rows.len(), width]` matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let width = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * width);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != width {
                return Err(Error::dim(
                    "from_rows",
                    format!("row {i} has {} entries, expected {width}", row.len()),
                ));
            }
            data.extend_from_slice(row);
        }
        Self::new([rows.len(), width], data)
    }

    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, rng: &mut R) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Number of rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Number of columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.cols();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols().max(1))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::dim(
                "item",
                format!("expected one element, shape is {:?}", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(())
    }

    fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.same_shape(other, op)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::from_parts(self.shape.clone(), data).finite(op)
    }

    /// Elementwise map without a finiteness check.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn map_checked(&self, op: &'static str, f: impl Fn(f64) -> f64) -> Result<Self> {
        self.map(f).finite(op)
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Self> {
        self.zip(other, "div", |a, b| a / b)
    }

    pub fn scale(&self, c: f64) -> Result<Self> {
        self.map_checked("scale", |v| v * c)
    }

    pub fn square(&self) -> Result<Self> {
        self.map_checked("square", |v| v * v)
    }

    pub fn sqrt(&self) -> Result<Self> {
        if let Some(v) = self.data.iter().find(|v| **v < 0.0) {
            return Err(Error::domain("sqrt", format!("negative input {v}")));
        }
        self.map_checked("sqrt", f64::sqrt)
    }

    pub fn exp(&self) -> Result<Self> {
        self.map_checked("exp", f64::exp)
    }

    pub fn log(&self) -> Result<Self> {
        if let Some(v) = self.data.iter().find(|v| **v <= 0.0) {
            return Err(Error::domain("log", format!("non-positive input {v}")));
        }
        self.map_checked("log", f64::ln)
    }

    pub fn elu(&self) -> Result<Self> {
        self.map_checked("elu", elu)
    }

    /// Derivative of ELU: 1 for positive inputs, `exp(x)` otherwise.
    pub fn elu_deriv(&self) -> Result<Self> {
        self.map_checked("elu_deriv", |v| if v > 0.0 { 1.0 } else { v.exp() })
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::dim(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    fn require_2d(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::dim(op, format!("expected a matrix, got {:?}", self.shape))),
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        let (m, k) = self.require_2d("matmul")?;
        let (k2, n) = other.require_2d("matmul")?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("{:?} x {:?}", self.shape, other.shape),
            ));
        }
        let mut out = vec![0.0; m * n];
        if m > 0 && n > 0 && k > 0 {
            // SAFETY: the slices hold exactly m*k, k*n and m*n elements laid
            // out row-major with the strides passed here.
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    k,
                    n,
                    1.0,
                    self.data.as_ptr(),
                    k as isize,
                    1,
                    other.data.as_ptr(),
                    n as isize,
                    1,
                    0.0,
                    out.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        Tensor::from_parts(vec![m, n], out).finite("matmul")
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.require_2d("transpose")?;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor::from_parts(vec![c, r], data))
    }

    /// Sums over the leading axis: `[n, ...rest] -> [...rest]`.
    pub fn sum_leading(&self) -> Result<Self> {
        let Some((&n, rest)) = self.shape.split_first() else {
            return Err(Error::dim("sum_leading", "scalar has no leading axis"));
        };
        let w: usize = rest.iter().product();
        let mut data = vec![0.0; w];
        for i in 0..n {
            for (acc, v) in data.iter_mut().zip(&self.data[i * w..(i + 1) * w]) {
                *acc += v;
            }
        }
        Tensor::from_parts(rest.to_vec(), data).finite("sum_leading")
    }

    /// Repeats the tensor `n` times along a new leading axis.
    pub fn broadcast_leading(&self, n: usize) -> Self {
        let mut shape = Vec::with_capacity(self.shape.len() + 1);
        shape.push(n);
        shape.extend_from_slice(&self.shape);
        let mut data = Vec::with_capacity(n * self.numel());
        for _ in 0..n {
            data.extend_from_slice(&self.data);
        }
        Tensor { shape, data }
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Self> {
        let (r, c) = self.require_2d("slice_cols")?;
        if start > end || end > c {
            return Err(Error::dim(
                "slice_cols",
                format!("range {start}..{end} outside {c} columns"),
            ));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&self.data[i * c + start..i * c + end]);
        }
        Ok(Tensor::from_parts(vec![r, w], data))
    }

    /// Places this matrix at column offset `start` inside a zero matrix with
    /// `total` columns.
    pub fn pad_cols(&self, start: usize, total: usize) -> Result<Self> {
        let (r, c) = self.require_2d("pad_cols")?;
        if start + c > total {
            return Err(Error::dim(
                "pad_cols",
                format!("{c} columns at offset {start} exceed {total}"),
            ));
        }
        let mut data = vec![0.0; r * total];
        for i in 0..r {
            data[i * total + start..i * total + start + c].copy_from_slice(&self.data[i * c..(i + 1) * c]);
        }
        Ok(Tensor::from_parts(vec![r, total], data))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Err(Error::dim("concat_cols", "nothing to concatenate"));
        };
        let (r, _) = first.require_2d("concat_cols")?;
        let mut total = 0;
        for p in parts {
            let (pr, pc) = p.require_2d("concat_cols")?;
            if pr != r {
                return Err(Error::dim("concat_cols", format!("row counts {r} vs {pr}")));
            }
            total += pc;
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Ok(Tensor::from_parts(vec![r, total], data))
    }

    /// Rows `start..end` of a matrix. Panics when out of range.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        let c = self.cols();
        Tensor::from_parts(vec![end - start, c], self.data[start * c..end * c].to_vec())
    }

    /// Per-row sum of squares of a matrix.
    pub fn row_sq_norms(&self) -> Vec<f64> {
        self.row_iter().map(|r| r.iter().map(|v| v * v).sum()).collect()
    }
}

#[inline]
pub(crate) fn elu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        v.exp_m1()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(a.matmul(&eye).unwrap(), a);
    }

    #[test]
    fn matmul_rectangular() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::matrix(3, 1, vec![1.0, 0.0, -1.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[-2.0, -2.0]);
        assert!(matches!(b.matmul(&b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn sum_of_squares() {
        let x = Tensor::vector(vec![3.0, 4.0]).unwrap();
        assert_eq!(x.square().unwrap().sum(), 25.0);
    }

    #[test]
    fn elu_limits() {
        assert_eq!(elu(0.0), 0.0);
        assert!((elu(-50.0) + 1.0).abs() < 1e-15);
        assert_eq!(elu(2.5), 2.5);
    }

    #[test]
    fn domain_errors() {
        let x = Tensor::vector(vec![1.0, -1.0]).unwrap();
        assert!(matches!(x.log(), Err(Error::Domain { .. })));
        assert!(matches!(x.sqrt(), Err(Error::Domain { .. })));
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(matches!(Tensor::new([2, 2], vec![1.0; 3]), Err(Error::Dimension { .. })));
        assert!(matches!(
            Tensor::new([1], vec![f64::NAN]),
            Err(Error::NonFinite { .. })
        ));
        let a = Tensor::ones([2]);
        let b = Tensor::ones([3]);
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn slice_pad_concat_agree() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let left = a.slice_cols(0, 1).unwrap();
        let right = a.slice_cols(1, 3).unwrap();
        assert_eq!(Tensor::concat_cols(&[&left, &right]).unwrap(), a);
        let padded = right.pad_cols(1, 3).unwrap();
        assert_eq!(padded.data(), &[0.0, 2.0, 3.0, 0.0, 5.0, 6.0]);
    }

    #[test]
    fn leading_axis_roundtrip() {
        let v = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let b = v.broadcast_leading(3);
        assert_eq!(b.shape(), &[3, 2]);
        assert_eq!(b.sum_leading().unwrap().data(), &[3.0, 6.0]);
    }
}
