use serde::{Deserialize, Serialize};

use crate::diffcore::Matrix;
use crate::error::{check_dim, Error, Result};

pub const STD_FLOOR: f64 = 1e-8;

/// Per-column affine standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        check_dim("normalizer std", mean.len(), std.len())?;
        Ok(Self {
            mean,
            std: std.into_iter().map(|s| s.max(STD_FLOOR)).collect(),
        })
    }

    /// Column means and population standard deviations of `data`.
    pub fn fit(data: &Matrix) -> Result<Self> {
        if data.rows() == 0 {
            return Err(Error::Precondition("cannot fit a normalizer on no data".into()));
        }
        let n = data.rows() as f64;
        let mut mean = vec![0.0; data.cols()];
        for row in data.iter_rows() {
            for (m, x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; data.cols()];
        for row in data.iter_rows() {
            for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var.into_iter().map(|v| (v / n).sqrt()).collect();
        Self::new(mean, std)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    pub fn normalize(&self, x: &Matrix) -> Result<Matrix> {
        check_dim("normalizer input", self.dim(), x.cols())?;
        let mut out = x.clone();
        for r in 0..out.rows() {
            for ((v, m), s) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }

    pub fn denormalize(&self, x: &Matrix) -> Result<Matrix> {
        check_dim("normalizer input", self.dim(), x.cols())?;
        let mut out = x.clone();
        for r in 0..out.rows() {
            for ((v, m), s) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * s + m;
            }
        }
        Ok(out)
    }
}
