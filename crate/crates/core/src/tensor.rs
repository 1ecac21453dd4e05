//! Dense row-major f32 tensors.
//!
//! Storage is f32; reductions accumulate in f64 and cast back. Operations
//! that can overflow check their output and return [`Error::NonFinite`]
//! instead of letting NaN/inf leak into later computations.

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {:?} needs {} values, got {}", shape, expected, data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a rank-2 tensor from rows. Panics on ragged input (test helper).
    pub fn from_rows(rows: &[&[f32]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            shape: vec![rows.len(), cols],
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    /// Standard normal draws.
    pub fn normal(rng: &mut Rng, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.normal() as f32).collect(),
        }
    }

    /// Uniform draws in `[lo, hi)`.
    pub fn uniform(rng: &mut Rng, lo: f64, hi: f64, shape: &[usize]) -> Result<Self> {
        if !(lo < hi) {
            return Err(Error::Config(format!("uniform bounds need lo < hi, got [{lo}, {hi})")));
        }
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                // rounding to f32 can land exactly on hi
                let v = rng.uniform(lo, hi) as f32;
                if f64::from(v) >= hi {
                    (hi as f32).next_down()
                } else {
                    v
                }
            })
            .collect();
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    pub fn ensure_finite(&self, op: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(op.to_string()))
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "zip_map",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
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

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        let out = self.zip_map(other, |a, b| a + b)?;
        out.ensure_finite("add")?;
        Ok(out)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        let out = self.zip_map(other, |a, b| a - b)?;
        out.ensure_finite("sub")?;
        Ok(out)
    }

    pub fn scale(&self, c: f32) -> Result<Self> {
        let out = self.map(|v| v * c);
        out.ensure_finite("scale")?;
        Ok(out)
    }

    /// Sum of squares accumulated in f64.
    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v) * f64::from(v)).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.sum_squares().sqrt()
    }

    /// Root-mean-square over all elements (0 for an empty tensor).
    pub fn rms(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            (self.sum_squares() / self.data.len() as f64).sqrt()
        }
    }

    /// Mean of squares over `axes`, keeping reduced axes at extent 1.
    pub fn mean_square(&self, axes: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut reduce = vec![false; rank];
        for &a in axes {
            if a >= rank || reduce[a] {
                return Err(Error::shape(
                    "mean_square",
                    format!("invalid axis set {:?} for rank {}", axes, rank),
                ));
            }
            reduce[a] = true;
        }
        let count: usize = (0..rank).filter(|&a| reduce[a]).map(|a| self.shape[a]).product();
        if count == 0 {
            return Err(Error::shape("mean_square", "empty reduction slice"));
        }
        let out_shape: Vec<usize> = (0..rank)
            .map(|a| if reduce[a] { 1 } else { self.shape[a] })
            .collect();
        let out_len: usize = out_shape.iter().product();
        let mut acc = vec![0.0f64; out_len];
        let in_strides = strides(&self.shape);
        let out_strides = strides(&out_shape);
        for (flat, &v) in self.data.iter().enumerate() {
            let mut rem = flat;
            let mut out_idx = 0;
            for a in 0..rank {
                let i = rem / in_strides[a];
                rem %= in_strides[a];
                if !reduce[a] {
                    out_idx += i * out_strides[a];
                }
            }
            acc[out_idx] += f64::from(v) * f64::from(v);
        }
        let data: Vec<f32> = acc.iter().map(|s| (s / count as f64) as f32).collect();
        let out = Self {
            shape: out_shape,
            data,
        };
        out.ensure_finite("mean_square")?;
        Ok(out)
    }

    /// Matrix product of two rank-2 tensors; sums over k left to right in f64.
    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape, other.shape),
            ));
        }
        let (r, k, c) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut data = vec![0.0f32; r * c];
        for i in 0..r {
            let row = &self.data[i * k..(i + 1) * k];
            for j in 0..c {
                let mut s = 0.0f64;
                for (kk, &a) in row.iter().enumerate() {
                    s += f64::from(a) * f64::from(other.data[kk * c + j]);
                }
                data[i * c + j] = s as f32;
            }
        }
        let out = Self {
            shape: vec![r, c],
            data,
        };
        out.ensure_finite("matmul")?;
        Ok(out)
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::shape("transpose", format!("rank {} tensor", self.rank())));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut data = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data,
        })
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for a in (0..shape.len().saturating_sub(1)).rev() {
        s[a] = s[a + 1] * shape[a + 1];
    }
    s
}
