//! Helpers shared by unit and integration tests. Not part of the public API.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::bundle::{FeatureMatrix, LabelVector};
use crate::calibration::CalibrationLayer;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// `n` uniformly random unit rows.
pub fn random_features(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> FeatureMatrix {
    FeatureMatrix::normalized(gaussian_matrix(rng, n, dim)).expect("random rows are nonzero")
}

/// Labels `0,0,..,1,1,..` with `shots` rows per class.
pub fn balanced_labels(classes: usize, shots: usize) -> LabelVector {
    let labels = (0..classes).flat_map(|c| std::iter::repeat_n(c, shots)).collect();
    LabelVector::new(labels, classes).unwrap()
}

/// Layer with a Gaussian projection of the given entry scale and no bias.
pub fn random_layer(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> CalibrationLayer {
    CalibrationLayer::from_parts(gaussian_matrix(rng, dim, dim) * scale, None).unwrap()
}

/// Central finite differences of `f` at `x` with step `h`.
pub fn central_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest entrywise `|a - b| / max(|a|, |b|, floor)`, with the floor set to
/// `1e-6` of the largest magnitude so that entries that are zero up to
/// rounding do not dominate.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-6 * scale).max(1e-12);
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
