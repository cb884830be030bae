//! Gaussian kernel on (optionally calibrated) cosine similarity:
//! `k(a, b) = exp(-beta * (1 - s(a, b)))`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::bundle::FeatureMatrix;
use crate::calibration::CalibrationLayer;
use crate::error::{ensure_dim, Error, Result};

/// Kernel sharpness. For unit vectors the kernel equals an RBF with
/// `exp(-(beta / 2) * |a - b|^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    beta: f64,
}

impl KernelParams {
    pub fn new(beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::invalid(format!("beta must be positive and finite, got {beta}")));
        }
        Ok(Self { beta })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    ensure_dim("cosine_similarity", a.len(), b.len())?;
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(dot.clamp(-1.0, 1.0))
}

#[inline]
pub fn gaussian_kernel(s: f64, params: KernelParams) -> f64 {
    (-params.beta * (1.0 - s)).exp()
}

/// Clamped similarity matrix `A B^T` of two row sets.
pub(crate) fn similarity(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut s = a * b.transpose();
    s.apply(|x| *x = x.clamp(-1.0, 1.0));
    s
}

/// Kernel matrix between rows that are already in the similarity space
/// (calibrated or raw).
pub(crate) fn kernel_from_rows(a: &DMatrix<f64>, b: &DMatrix<f64>, params: KernelParams) -> DMatrix<f64> {
    let mut k = similarity(a, b);
    k.apply(|s| *s = gaussian_kernel(*s, params));
    k
}

/// `rows(A) x rows(B)` Gaussian kernel matrix. When `calib` is given, both
/// sides are mapped through it first.
pub fn kernel_matrix(
    a: &FeatureMatrix,
    b: &FeatureMatrix,
    params: KernelParams,
    calib: Option<&CalibrationLayer>,
) -> Result<DMatrix<f64>> {
    ensure_dim("kernel_matrix", a.dim(), b.dim())?;
    match calib {
        Some(layer) => {
            let ca = layer.apply(a)?;
            let cb = layer.apply(b)?;
            Ok(kernel_from_rows(ca.as_matrix(), cb.as_matrix(), params))
        }
        None => Ok(kernel_from_rows(a.as_matrix(), b.as_matrix(), params)),
    }
}
