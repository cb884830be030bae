//! Independent oracles shared by the integration tests. Everything here is
//! written with explicit loops and a dense inverse so it shares no code path
//! with the library solvers.

#![allow(dead_code)]

use gpcache::bundle::{FeatureMatrix, LabelVector, ZeroShotWeights};
use gpcache::testutil::{gaussian_matrix, random_features};
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub struct Instance {
    pub keys: FeatureMatrix,
    pub labels: LabelVector,
    pub queries: FeatureMatrix,
    pub weights: ZeroShotWeights,
}

/// `c` classes with `k` keys each (labels in random order), `m` queries.
pub fn random_instance(rng: &mut ChaCha8Rng, c: usize, k: usize, dim: usize, m: usize) -> Instance {
    let keys = random_features(rng, c * k, dim);
    let mut labels: Vec<usize> = (0..c * k).map(|i| i % c).collect();
    for i in (1..labels.len()).rev() {
        let j = rng.random_range(0..=i);
        labels.swap(i, j);
    }
    Instance {
        keys,
        labels: LabelVector::new(labels, c).unwrap(),
        queries: random_features(rng, m, dim),
        weights: ZeroShotWeights::normalized(gaussian_matrix(rng, dim, c)).unwrap(),
    }
}

pub fn kernel_oracle(a: &DMatrix<f64>, b: &DMatrix<f64>, beta: f64) -> DMatrix<f64> {
    let mut k = DMatrix::zeros(a.nrows(), b.nrows());
    for i in 0..a.nrows() {
        for j in 0..b.nrows() {
            let mut s = 0.0;
            for t in 0..a.ncols() {
                s += a[(i, t)] * b[(j, t)];
            }
            k[(i, j)] = (-beta * (1.0 - s.clamp(-1.0, 1.0))).exp();
        }
    }
    k
}

/// GP mean (`m x c`) and variance (`m`) through an explicit inverse of
/// `K + sigma2 I`.
pub fn gp_oracle(
    keys: &DMatrix<f64>,
    labels: &[usize],
    c: usize,
    queries: &DMatrix<f64>,
    beta: f64,
    sigma2: f64,
) -> (DMatrix<f64>, Vec<f64>) {
    let n = keys.nrows();
    let mut a = kernel_oracle(keys, keys, beta);
    for i in 0..n {
        a[(i, i)] += sigma2;
    }
    let inv = a.try_inverse().expect("kernel system is invertible");
    let kq = kernel_oracle(queries, keys, beta);
    let m = queries.nrows();
    let mut mean = DMatrix::zeros(m, c);
    let mut var = vec![0.0; m];
    for q in 0..m {
        let mut quad = 0.0;
        for i in 0..n {
            // (k inv)_i, using the symmetry of inv
            let mut wi = 0.0;
            for j in 0..n {
                wi += inv[(i, j)] * kq[(q, j)];
            }
            mean[(q, labels[i])] += wi;
            quad += kq[(q, i)] * wi;
        }
        var[q] = (1.0 - quad).max(0.0);
    }
    (mean, var)
}

/// Nadaraya-Watson logits `k(f, F) Y`.
pub fn nw_oracle(keys: &DMatrix<f64>, labels: &[usize], c: usize, queries: &DMatrix<f64>, beta: f64) -> DMatrix<f64> {
    let kq = kernel_oracle(queries, keys, beta);
    let mut out = DMatrix::zeros(queries.nrows(), c);
    for q in 0..queries.nrows() {
        for i in 0..keys.nrows() {
            out[(q, labels[i])] += kq[(q, i)];
        }
    }
    out
}

/// The exact model restricted to the classes of each group: every group is
/// solved on its own keys with labels remapped into the group.
pub fn grouped_gp_oracle(
    keys: &DMatrix<f64>,
    labels: &[usize],
    c: usize,
    queries: &DMatrix<f64>,
    beta: f64,
    sigma2: f64,
    groups: &[Vec<usize>],
) -> (DMatrix<f64>, DMatrix<f64>) {
    let m = queries.nrows();
    let mut mean = DMatrix::zeros(m, c);
    let mut var = DMatrix::from_element(m, groups.len(), 1.0);
    for (g, classes) in groups.iter().enumerate() {
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| classes.contains(&labels[i])).collect();
        if rows.is_empty() {
            continue;
        }
        let local: Vec<usize> = rows
            .iter()
            .map(|&i| classes.iter().position(|&j| j == labels[i]).unwrap())
            .collect();
        let (gm, gv) = gp_oracle(&keys.select_rows(&rows), &local, classes.len(), queries, beta, sigma2);
        for (t, &j) in classes.iter().enumerate() {
            mean.set_column(j, &gm.column(t));
        }
        for q in 0..m {
            var[(q, g)] = gv[q];
        }
    }
    (mean, var)
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for j in 1..row.len() {
        if row[j] > row[best] {
            best = j;
        }
    }
    best
}
