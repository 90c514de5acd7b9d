//! Kernel functions and dense Gram matrices.

use serde::{Deserialize, Serialize};

use crate::data::FeatureMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Linear,
    Rbf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    /// RBF width; ignored by the linear kernel.
    pub sigma: f64,
}

impl KernelSpec {
    pub fn linear() -> Self {
        Self {
            kind: KernelKind::Linear,
            sigma: 1.0,
        }
    }

    pub fn rbf(sigma: f64) -> Result<Self> {
        let spec = Self {
            kind: KernelKind::Rbf,
            sigma,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Width `sqrt(d / 2)`, i.e. exponent `-|s - s1|^2 / d`.
    pub fn default_sigma(n_features: usize) -> f64 {
        (n_features.max(1) as f64 / 2.0).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == KernelKind::Rbf && !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("rbf sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }

    /// Kernel value without a dimension check.
    #[inline]
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match self.kind {
            KernelKind::Linear => dot(a, b),
            KernelKind::Rbf => rbf_unchecked(a, b, self.sigma),
        }
    }

    pub fn apply(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        check_dims(a, b)?;
        Ok(self.eval(a, b))
    }
}

fn check_dims(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok(())
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
fn rbf_unchecked(a: &[f64], b: &[f64], sigma: f64) -> f64 {
    (-squared_distance(a, b) / (2.0 * sigma * sigma)).exp()
}

/// `exp(-|s - s1|^2 / (2 sigma^2))`.
pub fn rbf_kernel(s: &[f64], s1: &[f64], sigma: f64) -> Result<f64> {
    check_dims(s, s1)?;
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::Config(format!("rbf sigma must be positive, got {sigma}")));
    }
    Ok(rbf_unchecked(s, s1, sigma))
}

pub fn linear_kernel(s: &[f64], s1: &[f64]) -> Result<f64> {
    check_dims(s, s1)?;
    Ok(dot(s, s1))
}

/// Dense symmetric kernel matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Gram {
    n: usize,
    values: Vec<f64>,
}

impl Gram {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }
}

/// Each upper-triangle entry is computed once and mirrored, so the result
/// is bit-symmetric.
pub fn gram_matrix(rows: &FeatureMatrix, spec: &KernelSpec) -> Result<Gram> {
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    spec.validate()?;
    let n = rows.n_rows();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        let ri = rows.row(i);
        for j in i..n {
            let k = spec.eval(ri, rows.row(j));
            values[i * n + j] = k;
            values[j * n + i] = k;
        }
    }
    Ok(Gram { n, values })
}
