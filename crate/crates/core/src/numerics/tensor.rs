use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

use super::kernels;

/// Dense row-major array of `f64`.
///
/// A scalar is a tensor of shape `[1]`. All dimensions are positive.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::invalid(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("Tensor::new", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Self::new(shape, vec![value; numel]).expect("positive shape")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged rows"));
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    /// Standard normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self::new(shape, data).expect("positive shape")
    }

    /// Normal entries truncated to two standard deviations (rejection sampled).
    pub fn trunc_normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| loop {
                let z: f64 = rng.sample(StandardNormal);
                if z.abs() <= 2.0 {
                    break std * z;
                }
            })
            .collect();
        Self::new(shape, data).expect("positive shape")
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            [n] => Ok((1, n)),
            _ => Err(Error::shape(op, &self.shape, &[])),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2("rows").map(|d| d.0).unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        self.dims2("cols").map(|d| d.1).unwrap_or(0)
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        let c = self.cols();
        self.data[i * c + j] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![0.0; r * c];
        kernels::transpose(&self.data, r, c, &mut out);
        Self::new(&[c, r], out)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, p) = other.dims2("matmul")?;
        if self.shape.len() != 2 || other.shape.len() != 2 || k != k2 {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * p];
        kernels::gemm(
            m,
            k,
            p,
            &self.data,
            false,
            &other.data,
            false,
            &mut out,
            0.0,
        );
        Self::new(&[m, p], out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape("zip_map", &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    /// Numerically stable log-softmax along `axis`.
    pub fn log_softmax(&self, axis: usize) -> Result<Self> {
        if axis >= self.shape.len() {
            return Err(Error::invalid(format!(
                "axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        let mut out = vec![0.0; self.data.len()];
        kernels::log_softmax_axis(&self.data, &self.shape, axis, &mut out);
        Self::new(&self.shape, out)
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Self> {
        let (r, c) = self.dims2("slice_cols")?;
        if start + len > c || len == 0 {
            return Err(Error::shape("slice_cols", &self.shape, &[start, len]));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&self.data[i * c + start..i * c + start + len]);
        }
        Self::new(&[r, len], out)
    }
}
