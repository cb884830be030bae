//! Validation-set grid search over `(alpha, beta, sigma2, eta)` and the
//! accuracy metrics used to report results.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::approx::GroupPartition;
use crate::bundle::{FeatureBundle, LabelVector, TuningView};
use crate::cache::{
    argmax_rows, build_cache, fused_logits, gp_readout, nw_cache_logits, zero_shot_logits, CacheHyper, CacheMode,
    CacheModel,
};
use crate::calibration::CalibrationLayer;
use crate::error::{ensure_dim, Error, Result};

/// Fraction of positions where `pred` and `truth` agree.
pub fn accuracy(pred: &LabelVector, truth: &LabelVector) -> Result<f64> {
    ensure_dim("accuracy lengths", truth.len(), pred.len())?;
    if truth.is_empty() {
        return Err(Error::invalid("accuracy of an empty split"));
    }
    let hits = pred.labels().iter().zip(truth.labels()).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}

fn accuracy_of(logits: &DMatrix<f64>, truth: &LabelVector) -> Result<f64> {
    let pred = LabelVector::new(argmax_rows(logits), truth.num_classes())?;
    accuracy(&pred, truth)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub eta: Vec<f64>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            alpha: vec![0.1, 0.3, 1.0, 3.0, 10.0, 30.0],
            beta: vec![1.0, 2.0, 5.5, 10.0, 20.0],
            sigma2: vec![0.01, 0.1, 1.0, 10.0, 100.0],
            eta: vec![0.0, 0.25, 0.5, 1.0, 2.0],
        }
    }
}

impl SearchSpace {
    pub fn single(hyper: &CacheHyper) -> Self {
        Self {
            alpha: vec![hyper.alpha],
            beta: vec![hyper.beta()],
            sigma2: vec![hyper.sigma2],
            eta: vec![hyper.eta],
        }
    }

    pub fn len(&self) -> usize {
        self.alpha.len() * self.beta.len() * self.sigma2.len() * self.eta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        for (name, list) in [
            ("alpha", &self.alpha),
            ("beta", &self.beta),
            ("sigma2", &self.sigma2),
            ("eta", &self.eta),
        ] {
            if list.is_empty() {
                return Err(Error::invalid(format!("search list for {name} is empty")));
            }
        }
        // constructing each hyper validates the individual values
        for &a in &self.alpha {
            for &b in &self.beta {
                for &s in &self.sigma2 {
                    for &e in &self.eta {
                        CacheHyper::new(a, b, s, e)?;
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub alpha: f64,
    pub beta: f64,
    pub sigma2: f64,
    pub eta: f64,
    pub val_acc: f64,
}

impl GridRow {
    fn key(&self) -> [f64; 4] {
        [self.alpha, self.beta, self.sigma2, self.eta]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best: CacheHyper,
    pub best_val_acc: f64,
    /// Every evaluated point, in loop order (beta, sigma2, eta, alpha).
    pub rows: Vec<GridRow>,
}

pub const GRID_CSV_HEADER: &str = "alpha,beta,sigma2,eta,val_acc";

pub fn grid_csv(rows: &[GridRow]) -> String {
    let mut out = String::from(GRID_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{},{},{:.6}\n", r.alpha, r.beta, r.sigma2, r.eta, r.val_acc));
    }
    out
}

/// Better on validation accuracy, then lexicographically smaller tuple.
fn is_better(candidate: &GridRow, best: &GridRow) -> bool {
    if candidate.val_acc != best.val_acc {
        return candidate.val_acc > best.val_acc;
    }
    candidate.key().partial_cmp(&best.key()) == Some(std::cmp::Ordering::Less)
}

/// Exhaustive search on the validation split. The cache is built once per
/// `(beta, sigma2)` and its readout reused for every `(eta, alpha)`. For the
/// N-W mode, `sigma2` and `eta` do not change the logits but are still
/// enumerated so that the table always has the full product shape.
pub fn grid_search(
    view: TuningView<'_>,
    space: &SearchSpace,
    mode: CacheMode,
    calib: Option<&CalibrationLayer>,
    partition: Option<&GroupPartition>,
) -> Result<GridResult> {
    space.validate()?;
    let val = view.val;
    if val.is_empty() {
        return Err(Error::invalid("grid search needs a non-empty validation split"));
    }
    let zs = zero_shot_logits(view.weights, &val.x)?;
    let mut rows = Vec::with_capacity(space.len());

    for &beta in &space.beta {
        let mut nw: Option<DMatrix<f64>> = None;
        for &sigma2 in &space.sigma2 {
            let hyper = CacheHyper::new(1.0, beta, sigma2, 0.0)?;
            let readout = match mode {
                CacheMode::Gp => {
                    let model = build_cache(&view.train.x, &view.train.y, hyper, calib, partition)?;
                    Some(gp_readout(&model, &val.x)?)
                }
                CacheMode::Nw if nw.is_none() => {
                    let model = build_cache(&view.train.x, &view.train.y, hyper, calib, None)?;
                    nw = Some(nw_cache_logits(&model, &val.x)?);
                    None
                }
                _ => None,
            };
            for &eta in &space.eta {
                let cache = match (&readout, mode) {
                    (Some(r), _) => Some(r.calibrated(eta)),
                    (None, CacheMode::Nw) => nw.clone(),
                    _ => None,
                };
                for &alpha in &space.alpha {
                    let val_acc = match &cache {
                        Some(c) if alpha != 0.0 => accuracy_of(&(&zs + c * alpha), &val.y)?,
                        _ => accuracy_of(&zs, &val.y)?,
                    };
                    rows.push(GridRow {
                        alpha,
                        beta,
                        sigma2,
                        eta,
                        val_acc,
                    });
                }
            }
        }
    }

    let mut best = rows[0];
    for r in &rows[1..] {
        if is_better(r, &best) {
            best = *r;
        }
    }
    log::info!(
        "grid search best: alpha {} beta {} sigma2 {} eta {} (val acc {:.4})",
        best.alpha,
        best.beta,
        best.sigma2,
        best.eta,
        best.val_acc
    );
    Ok(GridResult {
        best: CacheHyper::new(best.alpha, best.beta, best.sigma2, best.eta)?,
        best_val_acc: best.val_acc,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub val_acc: f64,
    pub test_acc: f64,
    pub per_class_acc: Vec<f64>,
}

/// Per-class accuracy; classes without rows in `truth` get `NaN`.
pub fn per_class_accuracy(pred: &LabelVector, truth: &LabelVector) -> Result<Vec<f64>> {
    ensure_dim("accuracy lengths", truth.len(), pred.len())?;
    let c = truth.num_classes();
    let mut hits = vec![0usize; c];
    let mut counts = vec![0usize; c];
    for (p, t) in pred.labels().iter().zip(truth.labels()) {
        counts[*t] += 1;
        if p == t {
            hits[*t] += 1;
        }
    }
    Ok(hits
        .iter()
        .zip(&counts)
        .map(|(&h, &n)| if n == 0 { f64::NAN } else { h as f64 / n as f64 })
        .collect())
}

/// Accuracy of an already built model on the validation and test splits.
pub fn evaluate_model(bundle: &FeatureBundle, model: &CacheModel, mode: CacheMode) -> Result<EvalReport> {
    let val_logits = fused_logits(model, &bundle.weights, &bundle.val.x, mode)?;
    let test_logits = fused_logits(model, &bundle.weights, &bundle.test.x, mode)?;
    let test_pred = LabelVector::new(argmax_rows(&test_logits), bundle.num_classes())?;
    Ok(EvalReport {
        val_acc: accuracy_of(&val_logits, &bundle.val.y)?,
        test_acc: accuracy(&test_pred, &bundle.test.y)?,
        per_class_acc: per_class_accuracy(&test_pred, &bundle.test.y)?,
    })
}

/// Builds the cache from the training split and scores both held-out splits.
pub fn evaluate(
    bundle: &FeatureBundle,
    hyper: &CacheHyper,
    mode: CacheMode,
    calib: Option<&CalibrationLayer>,
    partition: Option<&GroupPartition>,
) -> Result<EvalReport> {
    let model = build_cache(&bundle.train.x, &bundle.train.y, *hyper, calib, partition)?;
    evaluate_model(bundle, &model, mode)
}
