//! Covariance kernels over the controller-gain design space.
//!
//! Only the squared-exponential family with per-dimension lengthscales (ARD)
//! is implemented; it is the stationary kernel every model in this crate uses.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{MfError, Result};

/// Kernel family tag. Kept as an enum so configs stay explicit about the choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelFamily {
    SquaredExponential,
}

/// A squared-exponential ARD kernel
/// `k(x, y) = v^2 * exp(-1/2 * sum_j ((x_j - y_j) / l_j)^2)`.
///
/// `signal_variance` is `v^2` (already squared) and must be positive;
/// every lengthscale must be positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    family: KernelFamily,
    signal_variance: f64,
    lengthscales: Vec<f64>,
}

impl KernelSpec {
    pub fn squared_exponential(signal_variance: f64, lengthscales: Vec<f64>) -> Result<Self> {
        if !(signal_variance.is_finite() && signal_variance > 0.0) {
            return Err(MfError::InvalidInput(format!(
                "signal variance must be positive and finite, got {signal_variance}"
            )));
        }
        if lengthscales.is_empty() {
            return Err(MfError::InvalidInput(
                "kernel needs at least one lengthscale".into(),
            ));
        }
        if let Some(bad) = lengthscales.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
            return Err(MfError::InvalidInput(format!(
                "lengthscales must be positive and finite, got {bad}"
            )));
        }
        Ok(Self {
            family: KernelFamily::SquaredExponential,
            signal_variance,
            lengthscales,
        })
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn signal_variance(&self) -> f64 {
        self.signal_variance
    }

    pub fn lengthscales(&self) -> &[f64] {
        &self.lengthscales
    }

    /// Input dimensionality the kernel expects.
    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    /// Same lengthscales, different signal variance.
    pub fn with_signal_variance(&self, signal_variance: f64) -> Result<Self> {
        Self::squared_exponential(signal_variance, self.lengthscales.clone())
    }

    /// Evaluate `k(x, y)`.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(MfError::DimensionMismatch {
                context: "kernel eval (left argument)",
                expected: self.dim(),
                got: x.len(),
            });
        }
        if y.len() != self.dim() {
            return Err(MfError::DimensionMismatch {
                context: "kernel eval (right argument)",
                expected: self.dim(),
                got: y.len(),
            });
        }
        let mut s = 0.0;
        for j in 0..x.len() {
            let z = (x[j] - y[j]) / self.lengthscales[j];
            s += z * z;
        }
        Ok(self.signal_variance * (-0.5 * s).exp())
    }

    /// Cross-covariance matrix `K[i][j] = k(xs[i], ys[j])`.
    pub fn matrix(&self, xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<DMatrix<f64>> {
        let mut k = DMatrix::zeros(xs.len(), ys.len());
        for (i, x) in xs.iter().enumerate() {
            for (j, y) in ys.iter().enumerate() {
                k[(i, j)] = self.eval(x, y)?;
            }
        }
        Ok(k)
    }

    /// Symmetric covariance matrix of one input set. Diagonal entries are exact
    /// `v^2` and symmetry holds by construction (each pair is evaluated once).
    pub fn gram(&self, xs: &[Vec<f64>]) -> Result<DMatrix<f64>> {
        let n = xs.len();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            k[(i, i)] = self.signal_variance;
            for j in 0..i {
                let v = self.eval(&xs[i], &xs[j])?;
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        Ok(k)
    }
}
