use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Result};

/// Dense row-major array of `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(shape_err(
                "tensor",
                format!("dimensions must be positive, got {shape:?}"),
            ));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err("from_rows", "ragged rows"));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        assert!(n > 0, "tensor dimensions must be positive");
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Entries drawn i.i.d. from N(0, std²).
    pub fn randn<R: Rng + ?Sized>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("standard deviation must be finite and non-negative");
        let mut t = Self::zeros(shape);
        for v in &mut t.data {
            *v = normal.sample(rng);
        }
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

    /// Row count, treating a 1-D tensor as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[0],
        }
    }

    /// Column count, treating a 1-D tensor as a single row.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one dimension")
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn transpose(&self) -> Self {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Self {
            shape: vec![n, m],
            data: out,
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.cols() != other.rows() {
            return Err(shape_err("matmul", format!("{:?} x {:?}", self.shape, other.shape)));
        }
        let (m, k, n) = (self.rows(), self.cols(), other.cols());
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        if self.shape != other.shape {
            return Err(shape_err("add", format!("{:?} + {:?}", self.shape, other.shape)));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// `out += a[m×k] · b[k×n]`, row-major.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let coef = a[i * k + p];
            if coef == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += coef * bv;
            }
        }
    }
}

/// `out += a[m×k] · b[n×k]ᵀ`.
pub(crate) fn matmul_bt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] += a_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out += a[k×m]ᵀ · b[k×n]`.
pub(crate) fn matmul_at_into(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let coef = a[p * m + i];
            if coef == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += coef * bv;
            }
        }
    }
}
