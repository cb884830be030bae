//! Fine-tuning of the cache keys by minibatch SGD on the cross-entropy of
//! the fused logits.
//!
//! Keys enter the kernel through `psi(F) = phi(normalize(F))`, where `phi` is
//! the (frozen) calibration layer or the identity. Gradients are analytic:
//! through the query-key kernel rows, the variance denominator and, in
//! [`GradMode::FullGrad`], through `(K + s2 I)^-1`.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::approx::GroupPartition;
use crate::bundle::{FeatureBundle, FeatureMatrix, LabelVector, ZeroShotWeights};
use crate::cache::{
    argmax_rows, build_cache, chol_solve, gp_readout, nw_cache_logits, zero_shot_logits, CacheHyper, CacheMode,
    CacheModel, VARIANCE_FLOOR,
};
use crate::calibration::{CalibrationLayer, Sgd};
use crate::error::{ensure_dim, Error, Result};
use crate::kernel::kernel_from_rows;
use crate::tuner::accuracy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    /// Differentiate through the precision matrix as well.
    FullGrad,
    /// Treat `(K + s2 I)^-1` as a constant.
    NoGrad,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub mode: GradMode,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Re-normalize keys to unit length after every step.
    pub renormalize: bool,
    /// Refactorize the kernel systems every this many steps. Values above 1
    /// reuse a stale factorization in between.
    pub rebuild_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 256,
            learning_rate: 0.001,
            seed: 0,
            mode: GradMode::FullGrad,
            momentum: 0.9,
            weight_decay: 0.0,
            renormalize: true,
            rebuild_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.rebuild_every == 0 {
            return Err(Error::invalid("batch_size and rebuild_every must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be >= 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("weight decay must be >= 0"));
        }
        Ok(())
    }
}

/// Mean negative log-softmax of the true class.
pub fn cross_entropy(logits: &DMatrix<f64>, labels: &LabelVector) -> Result<f64> {
    ensure_dim("logits rows vs labels", logits.nrows(), labels.len())?;
    ensure_dim("logits cols vs classes", labels.num_classes(), logits.ncols())?;
    if logits.nrows() == 0 {
        return Ok(0.0);
    }
    let total: f64 = logits
        .row_iter()
        .enumerate()
        .map(|(i, row)| {
            let max = row.max();
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - row[labels.get(i)]
        })
        .sum();
    Ok(total / logits.nrows() as f64)
}

/// `(softmax(logits) - onehot) / m`, the gradient of [`cross_entropy`].
fn cross_entropy_grad(logits: &DMatrix<f64>, labels: &LabelVector) -> DMatrix<f64> {
    let m = logits.nrows() as f64;
    let mut g = logits.clone();
    for (i, mut row) in g.row_iter_mut().enumerate() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let sum = row.sum();
        row /= sum;
        row[labels.get(i)] -= 1.0;
        row /= m;
    }
    g
}

/// Intermediates of `psi` needed to pull a gradient back to the raw keys.
struct KeyMap {
    unit: DMatrix<f64>,
    norms: Vec<f64>,
    calibrated: Option<(DMatrix<f64>, Vec<f64>)>,
}

impl KeyMap {
    fn forward(raw: &DMatrix<f64>, calib: Option<&CalibrationLayer>) -> Self {
        let mut unit = raw.clone();
        let mut norms = Vec::with_capacity(raw.nrows());
        for mut row in unit.row_iter_mut() {
            let n = row.norm();
            row /= n;
            norms.push(n);
        }
        let calibrated = calib.map(|layer| layer.forward_rows(&unit));
        Self {
            unit,
            norms,
            calibrated,
        }
    }

    fn backward(&self, calib: Option<&CalibrationLayer>, d_feat: DMatrix<f64>) -> DMatrix<f64> {
        let d_unit = match (&self.calibrated, calib) {
            (Some((out, norms)), Some(layer)) => {
                layer.input_grad(&CalibrationLayer::backprop_norm(out, norms, &d_feat))
            }
            _ => d_feat,
        };
        CalibrationLayer::backprop_norm(&self.unit, &self.norms, &d_unit)
    }
}

fn check_finite(m: &DMatrix<f64>, what: &'static str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { what, step: 0 })
    }
}

/// Cross-entropy of the fused logits on `(queries, labels)` and its exact
/// gradient with respect to the model's keys, using the model's current
/// factorization. `mode` selects the cache term; the zero-shot mode (or
/// `alpha = 0`) yields a zero gradient.
pub fn loss_and_grad_keys(
    model: &CacheModel,
    w: &ZeroShotWeights,
    queries: &FeatureMatrix,
    labels: &LabelVector,
    cfg: &TrainConfig,
    mode: CacheMode,
) -> Result<(f64, DMatrix<f64>)> {
    ensure_dim("queries vs labels", queries.rows(), labels.len())?;
    ensure_dim("weights vs model classes", model.num_classes(), w.num_classes())?;
    if queries.rows() == 0 {
        return Err(Error::invalid("empty training batch"));
    }
    let hyper = *model.hyper();
    let raw_keys = model.keys().as_matrix();
    let (n, dim) = raw_keys.shape();
    let zs = zero_shot_logits(w, queries)?;

    if hyper.alpha == 0.0 || mode == CacheMode::ZeroShot {
        let loss = cross_entropy(&zs, labels)?;
        return Ok((loss, DMatrix::zeros(n, dim)));
    }

    let calib = model.calib();
    let keymap = KeyMap::forward(raw_keys, calib);
    let kf = model.key_features();
    let q = model.query_features(queries)?;
    let beta = hyper.beta();

    let (cache, readout) = match mode {
        CacheMode::Nw => (nw_cache_logits(model, queries)?, None),
        _ => {
            let r = gp_readout(model, queries)?;
            (r.calibrated(hyper.eta), Some(r))
        }
    };
    let logits = &zs + &cache * hyper.alpha;
    let loss = cross_entropy(&logits, labels)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { what: "loss", step: 0 });
    }
    let g = cross_entropy_grad(&logits, labels) * hyper.alpha;
    let mut d_feat = DMatrix::zeros(n, kf.ncols());

    match readout {
        None => {
            let kq = kernel_from_rows(&q, kf, hyper.kernel);
            let d_kq = &g * model.labels().one_hot().transpose();
            let ds = d_kq.component_mul(&kq) * beta;
            d_feat += ds.tr_mul(&q);
        }
        Some(r) => {
            for solve in &model.solve().groups {
                if solve.key_rows.is_empty() {
                    continue;
                }
                let g_idx = r.class_group[solve.classes[0]];
                let fg = kf.select_rows(&solve.key_rows);
                let kq = kernel_from_rows(&q, &fg, hyper.kernel);
                let gg = g.select_columns(&solve.classes);
                let mean = r.mean.select_columns(&solve.classes);
                let m = q.nrows();

                let mut d_mean = gg.clone();
                let mut dv = vec![0.0; m];
                for i in 0..m {
                    let v = r.variance[(i, g_idx)];
                    let vf = v.max(VARIANCE_FLOOR);
                    let d = vf.powf(hyper.eta);
                    let mut row = d_mean.row_mut(i);
                    row /= d;
                    if hyper.eta != 0.0 && v > VARIANCE_FLOOR {
                        let dd = -gg.row(i).dot(&mean.row(i)) / (d * d);
                        dv[i] = dd * hyper.eta * vf.powf(hyper.eta - 1.0);
                    }
                }

                // V = Kq P, rows are P k_i
                let vmat = chol_solve(&solve.lower, &kq.transpose()).transpose();
                let mut d_kq = &d_mean * solve.weights.transpose();
                for i in 0..m {
                    if dv[i] != 0.0 {
                        let mut row = d_kq.row_mut(i);
                        row -= vmat.row(i) * (2.0 * dv[i]);
                    }
                }
                let ds_q = d_kq.component_mul(&kq) * beta;
                let mut d_fg = ds_q.tr_mul(&q);

                if cfg.mode == GradMode::FullGrad {
                    let d_m = kq.tr_mul(&d_mean);
                    let p_dm = chol_solve(&solve.lower, &d_m);
                    let mut d_a = -(p_dm * solve.weights.transpose());
                    let mut scaled = vmat.clone();
                    for i in 0..m {
                        let mut row = scaled.row_mut(i);
                        row *= dv[i];
                    }
                    d_a += vmat.tr_mul(&scaled);
                    let k = kernel_from_rows(&fg, &fg, hyper.kernel);
                    let ds = d_a.component_mul(&k) * beta;
                    d_fg += (&ds + ds.transpose()) * &fg;
                }
                for (t, &row) in solve.key_rows.iter().enumerate() {
                    let mut dst = d_feat.row_mut(row);
                    dst += d_fg.row(t);
                }
            }
        }
    }

    let grad = keymap.backward(calib, d_feat);
    check_finite(&grad, "key gradient")?;
    Ok((loss, grad))
}

/// One row of the fine-tuning log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub wall_ms: f64,
}

pub const TRAIN_CSV_HEADER: &str = "epoch,train_loss,val_accuracy,wall_ms";

pub fn train_log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from(TRAIN_CSV_HEADER);
    out.push('\n');
    for e in log {
        out.push_str(&format!(
            "{},{:.8},{:.6},{:.3}\n",
            e.epoch, e.train_loss, e.val_accuracy, e.wall_ms
        ));
    }
    out
}

/// Fine-tuning output: the final model (refactorized on the final keys) and
/// the per-epoch log.
#[derive(Debug, Clone)]
pub struct FinetuneResult {
    pub model: CacheModel,
    pub log: Vec<EpochLog>,
}

fn run_finetune(
    bundle: &FeatureBundle,
    hyper: CacheHyper,
    cfg: &TrainConfig,
    calib: Option<&CalibrationLayer>,
    partition: Option<&GroupPartition>,
    mode: CacheMode,
) -> Result<FinetuneResult> {
    cfg.validate()?;
    bundle.validate()?;
    let train = &bundle.train;
    let mut model = build_cache(&train.x, &train.y, hyper, calib, partition)?;
    if cfg.epochs == 0 {
        return Ok(FinetuneResult { model, log: Vec::new() });
    }

    let n = train.len();
    let dim = bundle.dim();
    // raw (possibly unnormalized) keys and their norms
    let mut raw = train.x.as_matrix().clone();
    let mut norms = vec![1.0; n];
    let mut velocity = vec![0.0; n * dim];
    let opt = Sgd {
        lr: cfg.learning_rate,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        total_steps: 0,
        step: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    let start = Instant::now();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let q = train.x.select_rows(chunk);
            let y = train.y.select(chunk);
            let (loss, grad) = loss_and_grad_keys(&model, &bundle.weights, &q, &y, cfg, mode).map_err(|e| match e {
                Error::NonFiniteLoss { what, .. } => Error::NonFiniteLoss { what, step },
                other => other,
            })?;
            total += loss * chunk.len() as f64;
            seen += chunk.len();

            // the gradient is taken at the unit keys; scale it to the raw keys
            let mut grad = grad;
            for (i, mut row) in grad.row_iter_mut().enumerate() {
                row /= norms[i];
            }
            let before = raw.clone();
            opt.update(raw.as_mut_slice(), grad.as_slice(), &mut velocity, opt.current_lr());
            for i in 0..n {
                if raw.row(i) == before.row(i) {
                    continue;
                }
                let norm = raw.row(i).norm();
                if cfg.renormalize {
                    let mut row = raw.row_mut(i);
                    row /= norm;
                    norms[i] = 1.0;
                } else {
                    norms[i] = norm;
                }
            }
            step += 1;
            let mut unit = raw.clone();
            if !cfg.renormalize {
                for (i, mut row) in unit.row_iter_mut().enumerate() {
                    if norms[i] != 1.0 {
                        row /= norms[i];
                    }
                }
            }
            let fm = FeatureMatrix::from_unit_rows(unit);
            model = if step % cfg.rebuild_every == 0 {
                build_cache(&fm, &train.y, hyper, calib, partition)?
            } else {
                model.with_stale_keys(fm)?
            };
        }
        let train_loss = total / seen as f64;
        if !train_loss.is_finite() {
            return Err(Error::NonFiniteLoss { what: "loss", step });
        }
        let val_accuracy = model_accuracy(&model, &bundle.weights, &bundle.val.x, &bundle.val.y, mode)?;
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        log::info!("finetune epoch {epoch}: loss {train_loss:.6}, val accuracy {val_accuracy:.4}");
        log.push(EpochLog {
            epoch,
            train_loss,
            val_accuracy,
            wall_ms,
        });
    }
    if step % cfg.rebuild_every != 0 {
        model = build_cache(model.keys(), &train.y, hyper, calib, partition)?;
    }
    Ok(FinetuneResult { model, log })
}

fn model_accuracy(
    model: &CacheModel,
    w: &ZeroShotWeights,
    x: &FeatureMatrix,
    y: &LabelVector,
    mode: CacheMode,
) -> Result<f64> {
    let logits = crate::cache::fused_logits(model, w, x, mode)?;
    accuracy(&LabelVector::new(argmax_rows(&logits), w.num_classes())?, y)
}

/// Fine-tunes the keys of the GP cache, starting from the training features.
///
/// With `renormalize`, keys are projected back to the unit sphere after each
/// step. The kernel uses normalized keys either way.
pub fn finetune(
    bundle: &FeatureBundle,
    hyper: CacheHyper,
    cfg: &TrainConfig,
    calib: Option<&CalibrationLayer>,
    partition: Option<&GroupPartition>,
) -> Result<FinetuneResult> {
    run_finetune(bundle, hyper, cfg, calib, partition, CacheMode::Gp)
}

/// Same training loop on the kernel-weighted (N-W) cache logits.
pub fn finetune_nw_baseline(bundle: &FeatureBundle, hyper: CacheHyper, cfg: &TrainConfig) -> Result<FinetuneResult> {
    run_finetune(bundle, hyper, cfg, None, None, CacheMode::Nw)
}
