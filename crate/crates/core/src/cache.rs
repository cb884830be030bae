//! The cache model: zero-shot logits, the kernel-weighted (N-W) cache
//! readout, and the GP readout with its predictive variance.
//!
//! For keys `F` with one-hot values `Y`, a query `f` with kernel row
//! `k = k(f, F)` reads out
//!
//! ```text
//! mean     = k (K + s2 I)^-1 Y
//! variance = 1 - k (K + s2 I)^-1 k^T
//! logits   = mean / max(variance, 1e-6)^eta
//! ```
//!
//! per class group, and the final logits are `f^T W + alpha * logits`.

use nalgebra::{Cholesky, DMatrix};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::approx::GroupPartition;
use crate::bundle::{FeatureMatrix, LabelVector, ZeroShotWeights};
use crate::calibration::CalibrationLayer;
use crate::error::{ensure_dim, Error, Result};
use crate::kernel::{kernel_from_rows, KernelParams};

/// Floor applied to the predictive variance before raising it to `eta`.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Added to the noise variance when the kernel matrix cannot be factorized.
pub const JITTER: f64 = 1e-8;

/// A Cholesky pivot below this fraction of the largest diagonal entry is
/// treated as a failed factorization.
const PIVOT_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CacheHyper {
    pub alpha: f64,
    pub kernel: KernelParams,
    pub sigma2: f64,
    pub eta: f64,
}

impl CacheHyper {
    pub fn new(alpha: f64, beta: f64, sigma2: f64, eta: f64) -> Result<Self> {
        let kernel = KernelParams::new(beta)?;
        for (name, v) in [("alpha", alpha), ("sigma2", sigma2), ("eta", eta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(Self {
            alpha,
            kernel,
            sigma2,
            eta,
        })
    }

    pub fn beta(&self) -> f64 {
        self.kernel.beta()
    }
}

/// Which logits the fused classifier adds to the zero-shot term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheMode {
    ZeroShot,
    Nw,
    Gp,
}

impl std::str::FromStr for CacheMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zs" | "zero_shot" => Ok(CacheMode::ZeroShot),
            "nw" => Ok(CacheMode::Nw),
            "gp" => Ok(CacheMode::Gp),
            other => Err(Error::invalid(format!("unknown mode `{other}`"))),
        }
    }
}

/// Factorized system for one class group.
#[derive(Debug, Clone)]
pub struct GroupSolve {
    /// Global class indices, in the column order of `weights`.
    pub classes: Vec<usize>,
    /// Key rows whose label falls in `classes`.
    pub key_rows: Vec<usize>,
    /// Lower Cholesky factor of `K + s2 I`.
    pub lower: DMatrix<f64>,
    /// `(K + s2 I)^-1 Y`, `n_g x c_g`.
    pub weights: DMatrix<f64>,
    /// Noise variance actually used (after any jitter).
    pub sigma2: f64,
}

impl GroupSolve {
    /// Solves `(K + s2 I) X = B` through the stored factor.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        chol_solve(&self.lower, b)
    }

    /// `L^-1 B`.
    pub fn half_solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        lower_solve(&self.lower, b)
    }
}

#[derive(Debug, Clone)]
pub struct SolveCache {
    pub groups: Vec<GroupSolve>,
}

#[derive(Debug, Clone)]
pub struct CacheModel {
    keys: FeatureMatrix,
    labels: LabelVector,
    hyper: CacheHyper,
    calib: Option<CalibrationLayer>,
    partition: Option<GroupPartition>,
    key_features: DMatrix<f64>,
    solve: SolveCache,
}

impl CacheModel {
    pub fn keys(&self) -> &FeatureMatrix {
        &self.keys
    }

    pub fn labels(&self) -> &LabelVector {
        &self.labels
    }

    pub fn hyper(&self) -> &CacheHyper {
        &self.hyper
    }

    pub fn calib(&self) -> Option<&CalibrationLayer> {
        self.calib.as_ref()
    }

    pub fn partition(&self) -> Option<&GroupPartition> {
        self.partition.as_ref()
    }

    pub fn solve(&self) -> &SolveCache {
        &self.solve
    }

    pub fn num_classes(&self) -> usize {
        self.labels.num_classes()
    }

    pub fn dim(&self) -> usize {
        self.keys.dim()
    }

    /// Keys as seen by the kernel (calibrated when a layer is attached).
    pub fn key_features(&self) -> &DMatrix<f64> {
        &self.key_features
    }

    /// Same model with a different fusion weight and variance exponent.
    /// Neither enters the factorization, so nothing is recomputed.
    pub fn with_readout(&self, alpha: f64, eta: f64) -> Result<Self> {
        let hyper = CacheHyper::new(alpha, self.hyper.beta(), self.hyper.sigma2, eta)?;
        Ok(Self {
            hyper,
            ..self.clone()
        })
    }

    /// Same model with new keys but the old factorization. Only meant for
    /// training loops that refactorize every few steps.
    pub fn with_stale_keys(&self, keys: FeatureMatrix) -> Result<Self> {
        ensure_dim("replacement keys", self.keys.rows(), keys.rows())?;
        ensure_dim("replacement dim", self.dim(), keys.dim())?;
        let key_features = match &self.calib {
            Some(layer) => layer.apply(&keys)?.into_matrix(),
            None => keys.as_matrix().clone(),
        };
        Ok(Self {
            keys,
            key_features,
            ..self.clone()
        })
    }

    /// Queries mapped into the kernel's similarity space.
    pub(crate) fn query_features(&self, queries: &FeatureMatrix) -> Result<DMatrix<f64>> {
        ensure_dim("query dim", self.dim(), queries.dim())?;
        Ok(match &self.calib {
            Some(layer) => layer.apply(queries)?.into_matrix(),
            None => queries.as_matrix().clone(),
        })
    }
}

pub fn zero_shot_logits(w: &ZeroShotWeights, queries: &FeatureMatrix) -> Result<DMatrix<f64>> {
    ensure_dim("zero-shot dim", w.dim(), queries.dim())?;
    Ok(queries.as_matrix() * w.as_matrix())
}

/// Kernel-weighted sum of one-hot values, `k(f, F) Y`.
pub fn nw_cache_logits(model: &CacheModel, queries: &FeatureMatrix) -> Result<DMatrix<f64>> {
    let q = model.query_features(queries)?;
    let kq = kernel_from_rows(&q, &model.key_features, model.hyper.kernel);
    Ok(kq * model.labels.one_hot())
}

fn factorize(a: DMatrix<f64>) -> Option<DMatrix<f64>> {
    let max_diag = a.diagonal().max();
    let lower = Cholesky::new(a)?.unpack();
    let min_pivot = lower.diagonal().min();
    (min_pivot * min_pivot > PIVOT_FLOOR * max_diag).then_some(lower)
}

/// Lower Cholesky factor of `k + s2 I` under the jitter policy, together
/// with the noise variance actually used.
pub(crate) fn factor_spd(k: &DMatrix<f64>, sigma2: f64, group: usize) -> Result<(DMatrix<f64>, f64)> {
    let shifted = |s2: f64| {
        let mut a = k.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += s2;
        }
        a
    };
    if let Some(l) = factorize(shifted(sigma2)) {
        return Ok((l, sigma2));
    }
    if sigma2 < JITTER {
        let s2 = sigma2 + JITTER;
        log::warn!("group {group}: kernel matrix not positive definite, retrying with sigma2 = {s2:e}");
        if let Some(l) = factorize(shifted(s2)) {
            return Ok((l, s2));
        }
    }
    Err(Error::Factorization { group })
}

const SOLVE_CHUNK: usize = 256;

/// `L^-1 B`, parallel over column blocks of `B`.
pub(crate) fn lower_solve(lower: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    if lower.nrows() == 0 {
        return b.clone();
    }
    if b.ncols() <= SOLVE_CHUNK {
        let mut x = b.clone();
        lower.solve_lower_triangular_mut(&mut x);
        return x;
    }
    let starts: Vec<usize> = (0..b.ncols()).step_by(SOLVE_CHUNK).collect();
    let blocks: Vec<DMatrix<f64>> = starts
        .par_iter()
        .map(|&s| {
            let w = SOLVE_CHUNK.min(b.ncols() - s);
            let mut x = b.columns(s, w).into_owned();
            lower.solve_lower_triangular_mut(&mut x);
            x
        })
        .collect();
    let mut x = DMatrix::zeros(b.nrows(), b.ncols());
    for (&s, block) in starts.iter().zip(&blocks) {
        x.columns_mut(s, block.ncols()).copy_from(block);
    }
    x
}

/// `(L L^T)^-1 B`.
pub(crate) fn chol_solve(lower: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut x = lower_solve(lower, b);
    if lower.nrows() > 0 {
        lower.tr_solve_lower_triangular_mut(&mut x);
    }
    x
}

pub(crate) fn build_group(
    group: usize,
    classes: &[usize],
    key_rows: Vec<usize>,
    key_features: &DMatrix<f64>,
    labels: &LabelVector,
    kernel: KernelParams,
    sigma2: f64,
) -> Result<GroupSolve> {
    let n = key_rows.len();
    let mut y = DMatrix::zeros(n, classes.len());
    for (r, &row) in key_rows.iter().enumerate() {
        let col = classes.iter().position(|&c| c == labels.get(row)).unwrap();
        y[(r, col)] = 1.0;
    }
    if n == 0 {
        return Ok(GroupSolve {
            classes: classes.to_vec(),
            key_rows,
            lower: DMatrix::zeros(0, 0),
            weights: y,
            sigma2,
        });
    }
    let fg = key_features.select_rows(&key_rows);
    let k = kernel_from_rows(&fg, &fg, kernel);
    let (lower, used) = factor_spd(&k, sigma2, group)?;
    let weights = chol_solve(&lower, &y);
    Ok(GroupSolve {
        classes: classes.to_vec(),
        key_rows,
        lower,
        weights,
        sigma2: used,
    })
}

/// Builds the cache and factorizes one kernel system per class group. With
/// no partition all classes form a single group.
pub fn build_cache(
    keys: &FeatureMatrix,
    labels: &LabelVector,
    hyper: CacheHyper,
    calib: Option<&CalibrationLayer>,
    partition: Option<&GroupPartition>,
) -> Result<CacheModel> {
    ensure_dim("keys vs labels", keys.rows(), labels.len())?;
    if let Some(layer) = calib {
        ensure_dim("calibration dim", keys.dim(), layer.dim())?;
    }
    let c = labels.num_classes();
    if let Some(p) = partition {
        ensure_dim("partition classes", c, p.num_classes())?;
    }
    let key_features = match calib {
        Some(layer) => layer.apply(keys)?.into_matrix(),
        None => keys.as_matrix().clone(),
    };
    let all: Vec<Vec<usize>> = vec![(0..c).collect()];
    let groups = partition.map(|p| p.groups()).unwrap_or(&all);

    let solves = groups
        .par_iter()
        .enumerate()
        .map(|(g, classes)| {
            let mut member = vec![false; c];
            classes.iter().for_each(|&j| member[j] = true);
            let rows: Vec<usize> = (0..labels.len()).filter(|&i| member[labels.get(i)]).collect();
            build_group(g, classes, rows, &key_features, labels, hyper.kernel, hyper.sigma2)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CacheModel {
        keys: keys.clone(),
        labels: labels.clone(),
        hyper,
        calib: calib.cloned(),
        partition: partition.cloned(),
        key_features,
        solve: SolveCache { groups: solves },
    })
}

/// GP posterior mean for every class and the predictive variance of every
/// group, for one batch of queries. Both `alpha` and `eta` can be applied
/// afterwards without touching the factorization.
#[derive(Debug, Clone)]
pub struct GpReadout {
    /// `m x c`, global class order.
    pub mean: DMatrix<f64>,
    /// `m x g`, one column per group.
    pub variance: DMatrix<f64>,
    /// Group index of every class.
    pub class_group: Vec<usize>,
}

impl GpReadout {
    /// Mean divided by the floored variance raised to `eta`.
    pub fn calibrated(&self, eta: f64) -> DMatrix<f64> {
        let mut out = self.mean.clone();
        if eta == 0.0 {
            return out;
        }
        for (j, &g) in self.class_group.iter().enumerate() {
            for i in 0..out.nrows() {
                out[(i, j)] /= self.variance[(i, g)].max(VARIANCE_FLOOR).powf(eta);
            }
        }
        out
    }
}

pub fn gp_readout(model: &CacheModel, queries: &FeatureMatrix) -> Result<GpReadout> {
    let q = model.query_features(queries)?;
    let m = q.nrows();
    let groups = &model.solve.groups;
    let blocks: Vec<Option<(DMatrix<f64>, Vec<f64>)>> = groups
        .par_iter()
        .map(|solve| {
            if solve.key_rows.is_empty() {
                return None;
            }
            let fg = model.key_features.select_rows(&solve.key_rows);
            let kq = kernel_from_rows(&q, &fg, model.hyper.kernel);
            let block = &kq * &solve.weights;
            let half = solve.half_solve(&kq.transpose());
            let var = half.column_iter().map(|c| (1.0 - c.norm_squared()).max(0.0)).collect();
            Some((block, var))
        })
        .collect();

    let mut mean = DMatrix::zeros(m, model.num_classes());
    let mut variance = DMatrix::from_element(m, groups.len(), 1.0);
    let mut class_group = vec![0; model.num_classes()];
    for (g, (solve, out)) in groups.iter().zip(blocks).enumerate() {
        for &j in &solve.classes {
            class_group[j] = g;
        }
        if let Some((block, var)) = out {
            for (t, &j) in solve.classes.iter().enumerate() {
                mean.set_column(j, &block.column(t));
            }
            for (i, v) in var.into_iter().enumerate() {
                variance[(i, g)] = v;
            }
        }
    }
    Ok(GpReadout {
        mean,
        variance,
        class_group,
    })
}

/// Weight-calibrated logits `k (K + s2 I)^-1 Y` and the per-group variance.
pub fn gp_cache_logits(model: &CacheModel, queries: &FeatureMatrix) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let r = gp_readout(model, queries)?;
    Ok((r.mean, r.variance))
}

pub fn confidence_calibrated_logits(model: &CacheModel, queries: &FeatureMatrix) -> Result<DMatrix<f64>> {
    Ok(gp_readout(model, queries)?.calibrated(model.hyper.eta))
}

pub fn cache_logits(model: &CacheModel, queries: &FeatureMatrix, mode: CacheMode) -> Result<Option<DMatrix<f64>>> {
    Ok(match mode {
        CacheMode::ZeroShot => None,
        CacheMode::Nw => Some(nw_cache_logits(model, queries)?),
        CacheMode::Gp => Some(confidence_calibrated_logits(model, queries)?),
    })
}

/// `zero_shot + alpha * cache`, with the cache term chosen by `mode`.
pub fn fused_logits(
    model: &CacheModel,
    w: &ZeroShotWeights,
    queries: &FeatureMatrix,
    mode: CacheMode,
) -> Result<DMatrix<f64>> {
    ensure_dim("weights vs model classes", model.num_classes(), w.num_classes())?;
    let zs = zero_shot_logits(w, queries)?;
    if model.hyper.alpha == 0.0 {
        return Ok(zs);
    }
    Ok(match cache_logits(model, queries, mode)? {
        Some(cache) => zs + cache * model.hyper.alpha,
        None => zs,
    })
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn argmax_rows(logits: &DMatrix<f64>) -> Vec<usize> {
    logits
        .row_iter()
        .map(|row| {
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn predict(
    model: &CacheModel,
    w: &ZeroShotWeights,
    queries: &FeatureMatrix,
    mode: CacheMode,
) -> Result<LabelVector> {
    let logits = fused_logits(model, w, queries, mode)?;
    LabelVector::new(argmax_rows(&logits), w.num_classes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approx::make_partition;
    use crate::testutil::{balanced_labels, random_features, random_layer, rng};

    fn hyper(alpha: f64, beta: f64, sigma2: f64, eta: f64) -> CacheHyper {
        CacheHyper::new(alpha, beta, sigma2, eta).unwrap()
    }

    #[test]
    fn hyper_validation() {
        assert!(CacheHyper::new(-1.0, 1.0, 0.1, 0.0).is_err());
        assert!(CacheHyper::new(1.0, 0.0, 0.1, 0.0).is_err());
        assert!(CacheHyper::new(1.0, 1.0, -0.1, 0.0).is_err());
        assert!(CacheHyper::new(1.0, 1.0, 0.1, f64::NAN).is_err());
    }

    #[test]
    fn zero_shot_query_equal_to_column() {
        let mut r = rng(30);
        let cols = random_features(&mut r, 4, 6);
        let w = ZeroShotWeights::new(cols.as_matrix().transpose()).unwrap();
        let q = cols.select_rows(&[2]);
        let z = zero_shot_logits(&w, &q).unwrap();
        assert!((z[(0, 2)] - 1.0).abs() < 1e-12);
        for j in [0, 1, 3] {
            assert!(z[(0, j)] < 1.0);
        }
    }

    #[test]
    fn zero_shot_orthonormal_columns() {
        let w = ZeroShotWeights::new(DMatrix::identity(5, 3)).unwrap();
        let q = FeatureMatrix::from_row_slice(1, 5, &[1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let z = zero_shot_logits(&w, &q).unwrap();
        assert_eq!(z.as_slice(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_shot_matches_double_loop() {
        let mut r = rng(31);
        let w = ZeroShotWeights::new(random_features(&mut r, 5, 7).as_matrix().transpose()).unwrap();
        let q = random_features(&mut r, 3, 7);
        let z = zero_shot_logits(&w, &q).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                let mut acc = 0.0;
                for t in 0..7 {
                    acc += q.as_matrix()[(i, t)] * w.as_matrix()[(t, j)];
                }
                assert!((z[(i, j)] - acc).abs() < 1e-12);
            }
        }
        let bad = random_features(&mut r, 1, 6);
        assert!(zero_shot_logits(&w, &bad).is_err());
    }

    #[test]
    fn nw_sharp_kernel_recovers_key_label() {
        let mut r = rng(32);
        let keys = random_features(&mut r, 6, 8);
        let labels = balanced_labels(3, 2);
        let model = build_cache(&keys, &labels, hyper(1.0, 1000.0, 0.1, 0.0), None, None).unwrap();
        let q = keys.select_rows(&[4]);
        let z = nw_cache_logits(&model, &q).unwrap();
        let t = labels.get(4);
        assert!((z[(0, t)] - 1.0).abs() < 1e-3);
        for j in 0..3 {
            if j != t {
                assert!(z[(0, j)] < 1e-3);
            }
        }
    }

    #[test]
    fn nw_orthogonal_query_is_uninformative() {
        // keys live in the first 3 coordinates, the query in the 4th
        let keys = FeatureMatrix::normalized(DMatrix::from_row_slice(
            4,
            4,
            &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0],
        ))
        .unwrap();
        let labels = LabelVector::new(vec![0, 0, 1, 1], 2).unwrap();
        let model = build_cache(&keys, &labels, hyper(1.0, 1000.0, 0.1, 0.0), None, None).unwrap();
        let q = FeatureMatrix::from_row_slice(1, 4, &[0.0, 0.0, 0.0, 1.0]).unwrap();
        let z = nw_cache_logits(&model, &q).unwrap();
        let expected = 2.0 * (-1000.0f64).exp();
        assert_eq!(z[(0, 0)], expected);
        assert_eq!(z[(0, 1)], expected);
    }

    #[test]
    fn nw_matches_per_key_oracle() {
        let mut r = rng(33);
        let keys = random_features(&mut r, 6, 5);
        let labels = balanced_labels(3, 2);
        let q = random_features(&mut r, 4, 5);
        let model = build_cache(&keys, &labels, hyper(1.0, 3.0, 0.1, 0.0), None, None).unwrap();
        let z = nw_cache_logits(&model, &q).unwrap();
        for i in 0..4 {
            let mut row = [0.0; 3];
            for t in 0..6 {
                let s: f64 = q.row(i).iter().zip(keys.row(t)).map(|(a, b)| a * b).sum();
                row[labels.get(t)] += (-3.0 * (1.0 - s)).exp();
            }
            for j in 0..3 {
                assert!((z[(i, j)] - row[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_key_system() {
        let keys = FeatureMatrix::from_row_slice(1, 3, &[0.0, 1.0, 0.0]).unwrap();
        let labels = LabelVector::new(vec![1], 2).unwrap();
        let model = build_cache(&keys, &labels, hyper(1.0, 2.0, 0.0, 0.0), None, None).unwrap();
        let g = &model.solve().groups[0];
        assert_eq!(g.lower.as_slice(), &[1.0]);
        assert_eq!(g.weights.as_slice(), &[0.0, 1.0]);

        let s2 = 0.25;
        let model = build_cache(&keys, &labels, hyper(1.0, 2.0, s2, 1.0), None, None).unwrap();
        let (logits, var) = gp_cache_logits(&model, &keys).unwrap();
        assert!((logits[(0, 1)] - 1.0 / (1.0 + s2)).abs() < 1e-15);
        assert_eq!(logits[(0, 0)], 0.0);
        assert!((var[(0, 0)] - s2 / (1.0 + s2)).abs() < 1e-15);
        let cc = confidence_calibrated_logits(&model, &keys).unwrap();
        assert!((cc[(0, 1)] - 1.0 / s2).abs() < 1e-12);
    }

    #[test]
    fn duplicate_keys_trigger_jitter() {
        let keys = FeatureMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let labels = LabelVector::new(vec![0, 0, 1], 2).unwrap();
        let model = build_cache(&keys, &labels, hyper(1.0, 1.0, 0.0, 0.0), None, None).unwrap();
        assert_eq!(model.solve().groups[0].sigma2, JITTER);
        let (logits, _) = gp_cache_logits(&model, &keys).unwrap();
        assert!(logits.iter().all(|v| v.is_finite()));
        assert!(logits[(0, 0)] > 0.99);
    }

    #[test]
    fn solve_cache_residuals() {
        let mut r = rng(34);
        let keys = random_features(&mut r, 12, 6);
        let labels = balanced_labels(4, 3);
        let h = hyper(1.0, 4.0, 0.05, 0.0);
        let model = build_cache(&keys, &labels, h, None, None).unwrap();
        let g = &model.solve().groups[0];
        let k = kernel_from_rows(keys.as_matrix(), keys.as_matrix(), h.kernel);
        let a = &k + DMatrix::identity(12, 12) * 0.05;
        let rebuilt = &g.lower * g.lower.transpose();
        assert!((&rebuilt - &a).abs().max() < 1e-8);
        let resid = &a * &g.weights - labels.one_hot();
        assert!(resid.norm() < 1e-8);
    }

    #[test]
    fn orthogonal_query_has_unit_variance() {
        let keys = FeatureMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let labels = LabelVector::new(vec![0, 1], 2).unwrap();
        let model = build_cache(&keys, &labels, hyper(1.0, 1000.0, 0.1, 0.0), None, None).unwrap();
        let q = FeatureMatrix::from_row_slice(1, 3, &[0.0, 0.0, 1.0]).unwrap();
        let (logits, var) = gp_cache_logits(&model, &q).unwrap();
        assert!((var[(0, 0)] - 1.0).abs() < 1e-6);
        assert!(logits.abs().max() < 1e-100);
    }

    #[test]
    fn eta_zero_and_alpha_zero_collapse() {
        let mut r = rng(35);
        let keys = random_features(&mut r, 8, 5);
        let labels = balanced_labels(4, 2);
        let q = random_features(&mut r, 6, 5);
        let w = ZeroShotWeights::new(random_features(&mut r, 4, 5).as_matrix().transpose()).unwrap();
        let model = build_cache(&keys, &labels, hyper(2.0, 3.0, 0.1, 0.0), None, None).unwrap();
        assert_eq!(
            confidence_calibrated_logits(&model, &q).unwrap(),
            gp_cache_logits(&model, &q).unwrap().0
        );
        let zero = model.with_readout(0.0, 1.0).unwrap();
        let zs = zero_shot_logits(&w, &q).unwrap();
        for mode in [CacheMode::Nw, CacheMode::Gp, CacheMode::ZeroShot] {
            assert_eq!(fused_logits(&zero, &w, &q, mode).unwrap(), zs);
        }
        let pred = predict(&zero, &w, &q, CacheMode::Gp).unwrap();
        assert_eq!(pred.labels(), argmax_rows(&zs).as_slice());
    }

    #[test]
    fn argmax_ties_to_lowest_index() {
        let l = DMatrix::from_row_slice(2, 3, &[0.2, 0.9, 0.9, 1.0, 1.0, 1.0]);
        assert_eq!(argmax_rows(&l), vec![1, 0]);
    }

    #[test]
    fn single_group_partition_matches_exact() {
        let mut r = rng(36);
        let keys = random_features(&mut r, 12, 6);
        let labels = balanced_labels(4, 3);
        let q = random_features(&mut r, 5, 6);
        let h = hyper(1.0, 5.0, 0.1, 0.5);
        let p = make_partition(4, 1, 3).unwrap();
        let a = build_cache(&keys, &labels, h, None, None).unwrap();
        let b = build_cache(&keys, &labels, h, None, Some(&p)).unwrap();
        let la = confidence_calibrated_logits(&a, &q).unwrap();
        let lb = confidence_calibrated_logits(&b, &q).unwrap();
        assert!((la - lb).abs().max() <= 1e-10);
    }

    #[test]
    fn groups_only_see_their_own_keys() {
        let mut r = rng(37);
        let keys = random_features(&mut r, 12, 6);
        let labels = balanced_labels(4, 3);
        let q = random_features(&mut r, 3, 6);
        let h = hyper(1.0, 5.0, 0.1, 0.5);
        let p = make_partition(4, 2, 11).unwrap();
        let model = build_cache(&keys, &labels, h, None, Some(&p)).unwrap();
        let logits = confidence_calibrated_logits(&model, &q).unwrap();
        for classes in p.groups() {
            let rows: Vec<usize> = (0..12).filter(|&i| classes.contains(&labels.get(i))).collect();
            let sub_keys = keys.select_rows(&rows);
            let sub_labels: Vec<usize> = rows
                .iter()
                .map(|&i| classes.iter().position(|&c| c == labels.get(i)).unwrap())
                .collect();
            let sub = build_cache(
                &sub_keys,
                &LabelVector::new(sub_labels, classes.len()).unwrap(),
                h,
                None,
                None,
            )
            .unwrap();
            let expected = confidence_calibrated_logits(&sub, &q).unwrap();
            for (t, &j) in classes.iter().enumerate() {
                for i in 0..3 {
                    assert!((logits[(i, j)] - expected[(i, t)]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn calibrated_cache_uses_calibrated_kernel() {
        let mut r = rng(38);
        let keys = random_features(&mut r, 6, 5);
        let labels = balanced_labels(3, 2);
        let q = random_features(&mut r, 2, 5);
        let layer = random_layer(&mut r, 5, 0.5);
        let h = hyper(1.0, 3.0, 0.1, 0.0);
        let model = build_cache(&keys, &labels, h, Some(&layer), None).unwrap();
        let direct = build_cache(
            &layer.apply(&keys).unwrap(),
            &labels,
            h,
            None,
            None,
        )
        .unwrap();
        let qc = layer.apply(&q).unwrap();
        let a = gp_cache_logits(&model, &q).unwrap().0;
        let b = gp_cache_logits(&direct, &qc).unwrap().0;
        assert!((a - b).abs().max() < 1e-12);
        let a = nw_cache_logits(&model, &q).unwrap();
        let b = nw_cache_logits(&direct, &qc).unwrap();
        assert!((a - b).abs().max() < 1e-12);
    }
}
