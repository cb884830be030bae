//! Similarity calibration: a residual linear projection
//! `phi(f) = normalize(P f + f)` trained with an intra-modal contrastive
//! loss over hard-mined neighbor sets.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bundle::FeatureMatrix;
use crate::error::{ensure_dim, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationLayer {
    proj: DMatrix<f64>,
    bias: Option<DVector<f64>>,
}

/// Gradient of a scalar loss with respect to a layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub proj: DMatrix<f64>,
    pub bias: Option<DVector<f64>>,
}

impl CalibrationLayer {
    /// Zero projection: `apply` is the identity on unit rows.
    pub fn zeros(dim: usize, with_bias: bool) -> Self {
        Self {
            proj: DMatrix::zeros(dim, dim),
            bias: with_bias.then(|| DVector::zeros(dim)),
        }
    }

    pub fn from_parts(proj: DMatrix<f64>, bias: Option<DVector<f64>>) -> Result<Self> {
        if proj.nrows() != proj.ncols() || proj.nrows() == 0 {
            return Err(Error::invalid(format!(
                "projection must be square and non-empty, got {}x{}",
                proj.nrows(),
                proj.ncols()
            )));
        }
        if let Some(b) = &bias {
            ensure_dim("calibration bias", proj.nrows(), b.len())?;
        }
        let finite = proj.iter().chain(bias.iter().flat_map(|b| b.iter())).all(|x| x.is_finite());
        if !finite {
            return Err(Error::invalid("calibration parameters must be finite"));
        }
        Ok(Self { proj, bias })
    }

    pub fn dim(&self) -> usize {
        self.proj.nrows()
    }

    pub fn proj(&self) -> &DMatrix<f64> {
        &self.proj
    }

    pub fn bias(&self) -> Option<&DVector<f64>> {
        self.bias.as_ref()
    }

    /// Pre-normalization residual output `x P^T + x (+ b)` for row vectors.
    fn residual(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut u = x * self.proj.transpose() + x;
        if let Some(b) = &self.bias {
            for mut row in u.row_iter_mut() {
                row += b.transpose();
            }
        }
        u
    }

    /// Calibrated rows together with the pre-normalization norms.
    pub(crate) fn forward_rows(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
        let mut u = self.residual(x);
        let mut norms = Vec::with_capacity(u.nrows());
        for i in 0..u.nrows() {
            let n = u.row(i).norm();
            let mut row = u.row_mut(i);
            row /= n;
            norms.push(n);
        }
        (u, norms)
    }

    /// Pulls `d_out` (gradient w.r.t. calibrated rows) back to the
    /// pre-normalization residual `u`.
    pub(crate) fn backprop_norm(out: &DMatrix<f64>, norms: &[f64], d_out: &DMatrix<f64>) -> DMatrix<f64> {
        let mut du = d_out.clone();
        for i in 0..out.nrows() {
            let o = out.row(i);
            let proj = o.dot(&d_out.row(i));
            let mut row = du.row_mut(i);
            row -= o * proj;
            row /= norms[i];
        }
        du
    }

    /// Parameter gradient for inputs `x` given the residual gradient `du`.
    pub(crate) fn param_grad(&self, x: &DMatrix<f64>, du: &DMatrix<f64>) -> LayerGrad {
        LayerGrad {
            proj: du.transpose() * x,
            bias: self.bias.as_ref().map(|_| {
                DVector::from_iterator(du.ncols(), du.column_iter().map(|c| c.sum()))
            }),
        }
    }

    /// Gradient with respect to the inputs `x` given the residual gradient `du`.
    pub(crate) fn input_grad(&self, du: &DMatrix<f64>) -> DMatrix<f64> {
        du * &self.proj + du
    }

    pub fn apply(&self, x: &FeatureMatrix) -> Result<FeatureMatrix> {
        ensure_dim("calibration apply", self.dim(), x.dim())?;
        Ok(FeatureMatrix::from_unit_rows(self.forward_rows(x.as_matrix()).0))
    }

    fn apply_vec(&self, v: &[f64]) -> DVector<f64> {
        let x = DMatrix::from_row_slice(1, v.len(), v);
        self.forward_rows(&x).0.row(0).transpose()
    }
}

impl LayerGrad {
    fn add_assign(&mut self, other: &LayerGrad) {
        self.proj += &other.proj;
        if let (Some(a), Some(b)) = (&mut self.bias, &other.bias) {
            *a += b;
        }
    }
}

pub fn calibrated_similarity(layer: &CalibrationLayer, a: &[f64], b: &[f64]) -> Result<f64> {
    ensure_dim("calibrated_similarity", a.len(), b.len())?;
    ensure_dim("calibrated_similarity", layer.dim(), a.len())?;
    let (ca, cb) = (layer.apply_vec(a), layer.apply_vec(b));
    Ok(ca.dot(&cb).clamp(-1.0, 1.0))
}

/// The `r` rows most similar to the anchor by raw cosine similarity. The
/// anchor always comes first; the rest are ordered by similarity with ties
/// going to the lower index.
pub fn mine_neighbors(unlabeled: &FeatureMatrix, anchor: usize, r: usize) -> Result<Vec<usize>> {
    let n = unlabeled.rows();
    if anchor >= n {
        return Err(Error::invalid(format!("anchor {anchor} out of range for {n} rows")));
    }
    if r == 0 || r > n {
        return Err(Error::invalid(format!("neighbor count {r} must be in 1..={n}")));
    }
    let x = unlabeled.as_matrix();
    let sims = x * x.row(anchor).transpose();
    let mut others: Vec<usize> = (0..n).filter(|&i| i != anchor).collect();
    others.sort_by(|&i, &j| sims[j].total_cmp(&sims[i]).then(i.cmp(&j)));
    let mut out = Vec::with_capacity(r);
    out.push(anchor);
    out.extend_from_slice(&others[..r - 1]);
    Ok(out)
}

/// How contrastive batches pick the rows around each anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborMode {
    /// Nearest rows by original-feature cosine similarity.
    Hard,
    /// Uniformly random rows (plus the anchor); the no-mining ablation.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub batch_size: usize,
    pub neighbors: usize,
    pub temperature: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub seed: u64,
    pub bias: bool,
    pub mining: NeighborMode,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            neighbors: 128,
            temperature: 0.07,
            epochs: 10,
            learning_rate: 0.01,
            weight_decay: 5e-2,
            momentum: 0.9,
            seed: 0,
            bias: false,
            mining: NeighborMode::Hard,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.neighbors == 0 {
            return Err(Error::invalid("batch size and neighbor count must be >= 1"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid("temperature must be positive"));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("weight_decay", self.weight_decay),
            ("momentum", self.momentum),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Batch InfoNCE loss over neighbor sets and its exact gradient.
///
/// For each set `I`, every member `i` contributes
/// `-log(exp(z_ii / tau) / sum_{j in I} exp(z_ij / tau))` with
/// `z_ij = phi(g_i) . phi(f_j)`, `g` being the augmented views. The sum is
/// divided by the number of sets.
pub fn contrastive_loss(
    layer: &CalibrationLayer,
    originals: &FeatureMatrix,
    augmented: &FeatureMatrix,
    neighbor_sets: &[Vec<usize>],
    tau: f64,
) -> Result<(f64, LayerGrad)> {
    ensure_dim("contrastive rows", originals.rows(), augmented.rows())?;
    ensure_dim("contrastive dim", layer.dim(), originals.dim())?;
    ensure_dim("contrastive dim", layer.dim(), augmented.dim())?;
    if neighbor_sets.is_empty() {
        return Err(Error::invalid("no neighbor sets in batch"));
    }
    let n = originals.rows();
    let mut local = vec![usize::MAX; n];
    let mut touched = Vec::new();
    for set in neighbor_sets {
        if set.is_empty() {
            return Err(Error::invalid("empty neighbor set"));
        }
        for &i in set {
            if i >= n {
                return Err(Error::invalid(format!("neighbor index {i} out of range")));
            }
            if local[i] == usize::MAX {
                local[i] = touched.len();
                touched.push(i);
            }
        }
    }

    let xo = originals.as_matrix().select_rows(&touched);
    let xa = augmented.as_matrix().select_rows(&touched);
    let (fo, no) = layer.forward_rows(&xo);
    let (ga, na) = layer.forward_rows(&xa);
    let mut d_fo = DMatrix::zeros(fo.nrows(), fo.ncols());
    let mut d_ga = DMatrix::zeros(ga.nrows(), ga.ncols());

    let b = neighbor_sets.len() as f64;
    let mut loss = 0.0;
    for set in neighbor_sets {
        let idx: Vec<usize> = set.iter().map(|&i| local[i]).collect();
        let g = ga.select_rows(&idx);
        let f = fo.select_rows(&idx);
        let z = (&g * f.transpose()) / tau;
        let mut dz = DMatrix::zeros(idx.len(), idx.len());
        for i in 0..idx.len() {
            let row = z.row(i);
            let lse = log_sum_exp(row.iter().copied());
            loss += lse - z[(i, i)];
            for j in 0..idx.len() {
                dz[(i, j)] = (z[(i, j)] - lse).exp();
            }
            dz[(i, i)] -= 1.0;
        }
        dz /= tau * b;
        let dg = &dz * &f;
        let df = dz.transpose() * &g;
        for (k, &li) in idx.iter().enumerate() {
            let mut r = d_ga.row_mut(li);
            r += dg.row(k);
            let mut r = d_fo.row_mut(li);
            r += df.row(k);
        }
    }
    loss /= b;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { what: "contrastive loss", step: 0 });
    }

    let du_o = CalibrationLayer::backprop_norm(&fo, &no, &d_fo);
    let du_a = CalibrationLayer::backprop_norm(&ga, &na, &d_ga);
    let mut grad = layer.param_grad(&xo, &du_o);
    grad.add_assign(&layer.param_grad(&xa, &du_a));
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mean_loss: f64,
}

/// SGD with momentum, L2 weight decay and a
/// cosine learning-rate schedule annealed to zero over all steps.
pub(crate) struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub total_steps: usize,
    pub step: usize,
}

impl Sgd {
    pub fn current_lr(&self) -> f64 {
        if self.total_steps == 0 {
            return self.lr;
        }
        let t = self.step as f64 / self.total_steps as f64;
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
    }

    /// One update of `param` (flattened) in place.
    pub fn update(&self, param: &mut [f64], grad: &[f64], velocity: &mut [f64], lr: f64) {
        for ((p, g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
            let g = g + self.weight_decay * *p;
            *v = self.momentum * *v + g;
            *p -= lr * *v;
        }
    }
}

fn neighbor_table(
    unlabeled: &FeatureMatrix,
    r: usize,
) -> Result<Vec<Vec<usize>>> {
    (0..unlabeled.rows())
        .map(|a| mine_neighbors(unlabeled, a, r))
        .collect()
}

fn random_set(rng: &mut ChaCha8Rng, n: usize, anchor: usize, r: usize) -> Vec<usize> {
    let mut others: Vec<usize> = (0..n).filter(|&i| i != anchor).collect();
    others.shuffle(rng);
    let mut set = Vec::with_capacity(r);
    set.push(anchor);
    set.extend_from_slice(&others[..r - 1]);
    set
}

/// Trains a calibration layer from a zero projection. Returns the layer and
/// the per-epoch mean batch loss.
pub fn train_calibration(
    unlabeled: &FeatureMatrix,
    augmented: &FeatureMatrix,
    cfg: &ContrastiveConfig,
) -> Result<(CalibrationLayer, Vec<EpochLoss>)> {
    cfg.validate()?;
    ensure_dim("augmented rows", unlabeled.rows(), augmented.rows())?;
    ensure_dim("augmented dim", unlabeled.dim(), augmented.dim())?;
    let n = unlabeled.rows();
    let dim = unlabeled.dim();
    let mut layer = CalibrationLayer::zeros(dim, cfg.bias);
    if cfg.epochs == 0 {
        return Ok((layer, Vec::new()));
    }
    if cfg.neighbors > n {
        return Err(Error::invalid(format!(
            "neighbor count {} exceeds {n} unlabeled rows",
            cfg.neighbors
        )));
    }

    // retrieval always uses the original features, so the table is fixed
    let table = match cfg.mining {
        NeighborMode::Hard => Some(neighbor_table(unlabeled, cfg.neighbors)?),
        NeighborMode::Random => None,
    };

    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let mut opt = Sgd {
        lr: cfg.learning_rate,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        total_steps: steps_per_epoch * cfg.epochs,
        step: 0,
    };
    let mut vel_proj = vec![0.0; dim * dim];
    let mut vel_bias = vec![0.0; if cfg.bias { dim } else { 0 }];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let sets: Vec<Vec<usize>> = match &table {
                Some(t) => chunk.iter().map(|&a| t[a].clone()).collect(),
                None => chunk
                    .iter()
                    .map(|&a| random_set(&mut rng, n, a, cfg.neighbors))
                    .collect(),
            };
            let (loss, grad) = contrastive_loss(&layer, unlabeled, augmented, &sets, cfg.temperature)
                .map_err(|e| match e {
                    Error::NonFiniteLoss { what, .. } => Error::NonFiniteLoss {
                        what,
                        step: opt.step,
                    },
                    other => other,
                })?;
            let lr = opt.current_lr();
            opt.update(layer.proj.as_mut_slice(), grad.proj.as_slice(), &mut vel_proj, lr);
            if let (Some(b), Some(gb)) = (&mut layer.bias, &grad.bias) {
                opt.update(b.as_mut_slice(), gb.as_slice(), &mut vel_bias, lr);
            }
            opt.step += 1;
            total += loss;
            batches += 1;
        }
        let mean_loss = total / batches as f64;
        log::info!("calibration epoch {epoch}: mean loss {mean_loss:.6}");
        log.push(EpochLoss { epoch, mean_loss });
    }
    Ok((layer, log))
}

/// Mean within-class minus mean between-class similarity over all distinct
/// pairs of rows.
pub fn class_margin(x: &FeatureMatrix, labels: &[usize]) -> f64 {
    let s = x.as_matrix() * x.as_matrix().transpose();
    let (mut within, mut nw, mut between, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..x.rows() {
        for j in (i + 1)..x.rows() {
            if labels[i] == labels[j] {
                within += s[(i, j)];
                nw += 1;
            } else {
                between += s[(i, j)];
                nb += 1;
            }
        }
    }
    within / nw.max(1) as f64 - between / nb.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::cosine_similarity;
    use crate::testutil::{central_difference, random_features, random_layer, rng};

    #[test]
    fn zero_projection_is_identity() {
        let mut r = rng(11);
        let x = random_features(&mut r, 7, 5);
        let layer = CalibrationLayer::zeros(5, false);
        let y = layer.apply(&x).unwrap();
        for (a, b) in x.as_matrix().iter().zip(y.as_matrix().iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn apply_output_is_unit_norm() {
        let mut r = rng(12);
        let x = random_features(&mut r, 20, 6);
        let layer = random_layer(&mut r, 6, 2.0);
        let y = layer.apply(&x).unwrap();
        for i in 0..20 {
            assert!((y.as_matrix().row(i).norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn apply_matches_per_row_scalar_oracle() {
        let mut r = rng(13);
        let x = random_features(&mut r, 4, 5);
        let layer = random_layer(&mut r, 5, 0.7);
        let y = layer.apply(&x).unwrap();
        for i in 0..4 {
            let f = x.row(i);
            let mut u = vec![0.0; 5];
            for a in 0..5 {
                let mut acc = f[a];
                for b in 0..5 {
                    acc += layer.proj()[(a, b)] * f[b];
                }
                u[a] = acc;
            }
            let n = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            for a in 0..5 {
                assert!((y.as_matrix()[(i, a)] - u[a] / n).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn apply_rejects_dimension_mismatch() {
        let mut r = rng(14);
        let x = random_features(&mut r, 3, 4);
        assert!(CalibrationLayer::zeros(5, false).apply(&x).is_err());
    }

    #[test]
    fn calibrated_similarity_cases() {
        let mut r = rng(15);
        let x = random_features(&mut r, 2, 6);
        let (a, b) = (x.row(0), x.row(1));
        let zero = CalibrationLayer::zeros(6, false);
        assert!(
            (calibrated_similarity(&zero, &a, &b).unwrap() - cosine_similarity(&a, &b).unwrap()).abs()
                < 1e-15
        );
        let layer = random_layer(&mut r, 6, 1.0);
        assert!((calibrated_similarity(&layer, &a, &a).unwrap() - 1.0).abs() < 1e-12);
        let y = layer.apply(&x).unwrap();
        let oracle: f64 = y.row(0).iter().zip(y.row(1)).map(|(p, q)| p * q).sum();
        assert!((calibrated_similarity(&layer, &a, &b).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn mine_single_neighbor_is_self() {
        let mut r = rng(16);
        let x = random_features(&mut r, 10, 4);
        assert_eq!(mine_neighbors(&x, 3, 1).unwrap(), vec![3]);
    }

    #[test]
    fn mine_tie_break_by_index() {
        let mut r = rng(17);
        let base = random_features(&mut r, 5, 4);
        let mut m = base.as_matrix().clone();
        let row = m.row(1).into_owned();
        m.set_row(3, &row);
        let x = FeatureMatrix::new(m).unwrap();
        assert_eq!(mine_neighbors(&x, 1, 2).unwrap(), vec![1, 3]);
    }

    #[test]
    fn mine_matches_full_sort_oracle() {
        let mut r = rng(18);
        let x = random_features(&mut r, 50, 6);
        for anchor in [0, 17, 49] {
            let got = mine_neighbors(&x, anchor, 8).unwrap();
            let a = x.row(anchor);
            let mut all: Vec<(f64, usize)> = (0..50)
                .map(|i| {
                    let s: f64 = x.row(i).iter().zip(&a).map(|(p, q)| p * q).sum();
                    (if i == anchor { f64::INFINITY } else { s }, i)
                })
                .collect();
            all.sort_by(|p, q| q.0.partial_cmp(&p.0).unwrap().then(p.1.cmp(&q.1)));
            let expected: Vec<usize> = all[..8].iter().map(|p| p.1).collect();
            assert_eq!(got, expected);
        }
    }

    #[test]
    fn mine_rejects_too_many() {
        let mut r = rng(19);
        let x = random_features(&mut r, 4, 4);
        assert!(mine_neighbors(&x, 0, 5).is_err());
    }

    #[test]
    fn singleton_sets_give_zero_loss() {
        let mut r = rng(20);
        let x = random_features(&mut r, 6, 5);
        let g = random_features(&mut r, 6, 5);
        let layer = random_layer(&mut r, 5, 0.3);
        let sets = vec![vec![0], vec![3], vec![5]];
        let (loss, grad) = contrastive_loss(&layer, &x, &g, &sets, 0.1).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.proj.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_projection_loss_matches_scalar_oracle() {
        let mut r = rng(21);
        let x = random_features(&mut r, 8, 5);
        let layer = CalibrationLayer::zeros(5, false);
        let sets = vec![vec![0, 2, 5], vec![1, 7, 3, 4]];
        let tau = 0.2;
        let (loss, _) = contrastive_loss(&layer, &x, &x, &sets, tau).unwrap();
        let dot = |i: usize, j: usize| -> f64 { x.row(i).iter().zip(x.row(j)).map(|(a, b)| a * b).sum() };
        let mut oracle = 0.0;
        for set in &sets {
            for &i in set {
                let denom: f64 = set.iter().map(|&j| (dot(i, j) / tau).exp()).sum();
                oracle += -((dot(i, i) / tau).exp() / denom).ln();
            }
        }
        oracle /= sets.len() as f64;
        assert!((loss - oracle).abs() < 1e-12, "{loss} vs {oracle}");
        assert!(loss >= 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut r = rng(22);
        for with_bias in [false, true] {
            let x = random_features(&mut r, 10, 6);
            let g = random_features(&mut r, 10, 6);
            let mut layer = random_layer(&mut r, 6, 0.4);
            if with_bias {
                layer.bias = Some(DVector::from_fn(6, |i, _| 0.1 * i as f64 - 0.2));
            }
            let sets: Vec<Vec<usize>> = [0, 4, 9].iter().map(|&a| mine_neighbors(&x, a, 3).unwrap()).collect();
            let (_, grad) = contrastive_loss(&layer, &x, &g, &sets, 0.5).unwrap();
            let base = layer.proj.as_slice().to_vec();
            let fd = central_difference(&base, 1e-5, |p| {
                let mut l = layer.clone();
                l.proj.as_mut_slice().copy_from_slice(p);
                contrastive_loss(&l, &x, &g, &sets, 0.5).unwrap().0
            });
            let err = crate::testutil::max_relative_error(grad.proj.as_slice(), &fd);
            assert!(err < 1e-4, "relative error {err}");
            if with_bias {
                let b0 = layer.bias.as_ref().unwrap().as_slice().to_vec();
                let fd = central_difference(&b0, 1e-5, |p| {
                    let mut l = layer.clone();
                    l.bias = Some(DVector::from_column_slice(p));
                    contrastive_loss(&l, &x, &g, &sets, 0.5).unwrap().0
                });
                let err = crate::testutil::max_relative_error(grad.bias.as_ref().unwrap().as_slice(), &fd);
                assert!(err < 1e-4, "bias relative error {err}");
            }
        }
    }

    #[test]
    fn empty_set_rejected() {
        let mut r = rng(23);
        let x = random_features(&mut r, 4, 4);
        let layer = CalibrationLayer::zeros(4, false);
        assert!(contrastive_loss(&layer, &x, &x, &[vec![]], 0.1).is_err());
        assert!(contrastive_loss(&layer, &x, &x, &[], 0.1).is_err());
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let mut r = rng(24);
        let x = random_features(&mut r, 12, 5);
        let cfg = ContrastiveConfig {
            epochs: 0,
            ..Default::default()
        };
        let (layer, log) = train_calibration(&x, &x, &cfg).unwrap();
        assert_eq!(layer, CalibrationLayer::zeros(5, false));
        assert!(log.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let mut r = rng(25);
        let x = random_features(&mut r, 30, 6);
        let g = random_features(&mut r, 30, 6);
        let cfg = ContrastiveConfig {
            batch_size: 8,
            neighbors: 5,
            epochs: 3,
            learning_rate: 0.1,
            seed: 9,
            ..Default::default()
        };
        let (a, la) = train_calibration(&x, &g, &cfg).unwrap();
        let (b, lb) = train_calibration(&x, &g, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_ne!(a, CalibrationLayer::zeros(6, false));
    }

    #[test]
    fn cosine_schedule_anneals_to_zero() {
        let opt = Sgd {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            total_steps: 10,
            step: 10,
        };
        assert!(opt.current_lr().abs() < 1e-15);
        let start = Sgd { step: 0, ..opt };
        assert_eq!(start.current_lr(), 0.1);
    }

    #[test]
    fn training_widens_held_out_class_margin() {
        use crate::bundle::{generate_synthetic, SyntheticConfig};
        let mut cfg = SyntheticConfig::new(10, 4, 32, 0.4, 3);
        cfg.nuisance_rank = 4;
        cfg.nuisance_share = 0.9;
        cfg.n_test_per_class = 10;
        cfg.n_val_per_class = 20;
        let b = generate_synthetic(&cfg).unwrap();
        let pool = b.unlabeled.as_ref().unwrap();
        let cc = ContrastiveConfig {
            neighbors: 64,
            epochs: 5,
            ..Default::default()
        };
        let (layer, _) = train_calibration(pool, b.unlabeled_augmented.as_ref().unwrap(), &cc).unwrap();
        let raw = class_margin(&b.val.x, b.val.y.labels());
        let calibrated = class_margin(&layer.apply(&b.val.x).unwrap(), b.val.y.labels());
        assert!(calibrated > raw, "margin {raw} -> {calibrated}");
    }
}
