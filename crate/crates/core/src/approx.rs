//! Cheaper alternatives to the exact cache readout: class-group
//! partitioning, Nyström and random-feature low-rank kernels, class-mean
//! prototypes, and a small benchmark harness comparing them.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::bundle::{FeatureBundle, FeatureMatrix, LabelVector};
use crate::cache::{
    argmax_rows, build_cache, chol_solve, factor_spd, gp_readout, lower_solve, zero_shot_logits, CacheHyper,
    GpReadout,
};
use crate::error::{ensure_dim, Error, Result};
use crate::kernel::kernel_from_rows;
use crate::tuner::accuracy;

/// Eigenvalues of the landmark kernel below this fraction of the largest
/// are dropped from the Nyström pseudo-inverse.
pub const NYSTROM_TRUNCATION: f64 = 1e-10;

/// A random split of the classes into disjoint groups of near-equal size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupPartition {
    groups: Vec<Vec<usize>>,
    num_classes: usize,
    seed: u64,
}

impl GroupPartition {
    /// Class indices of each group, ascending within a group.
    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Shuffles `0..c` with `seed` and deals the classes round-robin into `g`
/// groups.
pub fn make_partition(c: usize, g: usize, seed: u64) -> Result<GroupPartition> {
    if g == 0 || g > c {
        return Err(Error::invalid(format!("group count {g} must be in 1..={c}")));
    }
    let mut order: Vec<usize> = (0..c).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut groups = vec![Vec::with_capacity(c.div_ceil(g)); g];
    for (p, class) in order.into_iter().enumerate() {
        groups[p % g].push(class);
    }
    groups.iter_mut().for_each(|grp| grp.sort_unstable());
    Ok(GroupPartition {
        groups,
        num_classes: c,
        seed,
    })
}

/// `(s2 I + Z Z^T)^-1` through the `r x r` system
/// `(s2 I + Z Z^T)^-1 = (I - Z (s2 I + Z^T Z)^-1 Z^T) / s2`.
pub fn low_rank_inverse(z: &DMatrix<f64>, sigma2: f64) -> Result<DMatrix<f64>> {
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::invalid(format!("sigma2 must be positive, got {sigma2}")));
    }
    let n = z.nrows();
    let (lower, used) = factor_spd(&z.tr_mul(z), sigma2, 0)?;
    let inner = chol_solve(&lower, &z.transpose());
    Ok((DMatrix::identity(n, n) - z * inner) / used)
}

/// GP readout for the low-rank kernel `K ~ Z Z^T` with query features `zq`,
/// keeping the unit prior variance of the exact kernel. Only an
/// `min(r, n)`-sized system is factorized.
pub fn low_rank_readout(z: &DMatrix<f64>, zq: &DMatrix<f64>, y: &DMatrix<f64>, sigma2: f64) -> Result<GpReadout> {
    ensure_dim("low-rank rows vs values", z.nrows(), y.nrows())?;
    ensure_dim("low-rank feature count", z.ncols(), zq.ncols())?;
    let (n, r) = z.shape();
    let m = zq.nrows();
    let (mean, variance) = if r <= n {
        let (lower, used) = factor_spd(&z.tr_mul(z), sigma2, 0)?;
        let mean = zq * chol_solve(&lower, &z.tr_mul(y));
        let half = lower_solve(&lower, &zq.transpose());
        let var: Vec<f64> = (0..m)
            .map(|i| (1.0 - zq.row(i).norm_squared() + used * half.column(i).norm_squared()).max(0.0))
            .collect();
        (mean, var)
    } else {
        let (lower, _) = factor_spd(&(z * z.transpose()), sigma2, 0)?;
        let kq = zq * z.transpose();
        let mean = &kq * chol_solve(&lower, y);
        let half = lower_solve(&lower, &kq.transpose());
        let var: Vec<f64> = half.column_iter().map(|c| (1.0 - c.norm_squared()).max(0.0)).collect();
        (mean, var)
    };
    Ok(GpReadout {
        variance: DMatrix::from_vec(m, 1, variance),
        class_group: vec![0; mean.ncols()],
        mean,
    })
}

/// Random Fourier features for the kernel `exp(-(beta / 2) |x - y|^2)`,
/// which equals the cosine kernel on unit vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct RffMap {
    frequencies: DMatrix<f64>,
    phases: DVector<f64>,
    beta: f64,
    seed: u64,
}

impl RffMap {
    pub fn new(dim: usize, features: usize, beta: f64, seed: u64) -> Result<Self> {
        if features == 0 || dim == 0 {
            return Err(Error::invalid("feature count and dim must be positive"));
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::invalid(format!("beta must be positive, got {beta}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, beta.sqrt()).unwrap();
        let frequencies = DMatrix::from_fn(features, dim, |_, _| normal.sample(&mut rng));
        let uniform = Uniform::new(0.0, std::f64::consts::TAU).unwrap();
        let phases = DVector::from_fn(features, |_, _| rng.sample(uniform));
        Ok(Self {
            frequencies,
            phases,
            beta,
            seed,
        })
    }

    pub fn features(&self) -> usize {
        self.frequencies.nrows()
    }

    pub fn dim(&self) -> usize {
        self.frequencies.ncols()
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `sqrt(2 / D) cos(x Omega^T + phi)` for every row of `x`.
    pub fn map(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        ensure_dim("rff input dim", self.dim(), x.ncols())?;
        let scale = (2.0 / self.features() as f64).sqrt();
        let mut z = x * self.frequencies.transpose();
        for (j, mut col) in z.column_iter_mut().enumerate() {
            let phi = self.phases[j];
            col.apply(|v| *v = scale * (*v + phi).cos());
        }
        Ok(z)
    }
}

fn check_beta(rff: &RffMap, hyper: &CacheHyper) -> Result<()> {
    if rff.beta() != hyper.beta() {
        return Err(Error::invalid(format!(
            "rff map was drawn for beta {} but hyper has beta {}",
            rff.beta(),
            hyper.beta()
        )));
    }
    Ok(())
}

/// Cache logits (variance-calibrated with `hyper.eta`) from the random
/// feature approximation of the kernel.
pub fn rff_logits(
    keys: &FeatureMatrix,
    labels: &LabelVector,
    queries: &FeatureMatrix,
    hyper: &CacheHyper,
    rff: &RffMap,
) -> Result<DMatrix<f64>> {
    Ok(rff_readout(keys, labels, queries, hyper, rff)?.calibrated(hyper.eta))
}

pub fn rff_readout(
    keys: &FeatureMatrix,
    labels: &LabelVector,
    queries: &FeatureMatrix,
    hyper: &CacheHyper,
    rff: &RffMap,
) -> Result<GpReadout> {
    ensure_dim("keys vs labels", keys.rows(), labels.len())?;
    check_beta(rff, hyper)?;
    let z = rff.map(keys.as_matrix())?;
    let zq = rff.map(queries.as_matrix())?;
    low_rank_readout(&z, &zq, &labels.one_hot(), hyper.sigma2)
}

/// `per_class` row indices of every class, drawn uniformly without
/// replacement and returned class by class.
pub fn balanced_landmarks(labels: &LabelVector, landmarks: usize, seed: u64) -> Result<Vec<usize>> {
    let c = labels.num_classes();
    if landmarks == 0 || landmarks % c != 0 {
        return Err(Error::invalid(format!(
            "landmark count {landmarks} must be a positive multiple of {c} classes"
        )));
    }
    let per_class = landmarks / c;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(landmarks);
    for class in 0..c {
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels.get(i) == class).collect();
        if rows.len() < per_class {
            return Err(Error::invalid(format!(
                "class {class} has {} rows, fewer than {per_class} landmarks",
                rows.len()
            )));
        }
        let mut picked: Vec<usize> = rows.choose_multiple(&mut rng, per_class).copied().collect();
        picked.sort_unstable();
        out.extend(picked);
    }
    Ok(out)
}

/// Nyström features `Z` with `Z Z^T ~ K`, plus the projection applied to
/// query kernel rows.
#[derive(Debug, Clone)]
pub struct NystromSketch {
    pub landmarks: Vec<usize>,
    /// `U_r Lambda_r^{-1/2}`, `L x r`.
    pub projection: DMatrix<f64>,
    /// `K_nL U_r Lambda_r^{-1/2}`, `n x r`.
    pub factor: DMatrix<f64>,
}

impl NystromSketch {
    pub fn new(keys: &FeatureMatrix, labels: &LabelVector, hyper: &CacheHyper, landmarks: usize, seed: u64) -> Result<Self> {
        ensure_dim("keys vs labels", keys.rows(), labels.len())?;
        if landmarks > keys.rows() {
            return Err(Error::invalid(format!(
                "landmark count {landmarks} exceeds {} keys",
                keys.rows()
            )));
        }
        let idx = balanced_landmarks(labels, landmarks, seed)?;
        let fl = keys.as_matrix().select_rows(&idx);
        let kll = kernel_from_rows(&fl, &fl, hyper.kernel);
        let eig = SymmetricEigen::new(kll);
        let top = eig.eigenvalues.max();
        if !(top > 0.0) {
            return Err(Error::invalid("landmark kernel has no positive eigenvalue"));
        }
        let keep: Vec<usize> = (0..landmarks)
            .filter(|&j| eig.eigenvalues[j] > NYSTROM_TRUNCATION * top)
            .collect();
        let mut projection = eig.eigenvectors.select_columns(&keep);
        for (t, &j) in keep.iter().enumerate() {
            let mut col = projection.column_mut(t);
            col /= eig.eigenvalues[j].sqrt();
        }
        let factor = kernel_from_rows(keys.as_matrix(), &fl, hyper.kernel) * &projection;
        Ok(Self {
            landmarks: idx,
            projection,
            factor,
        })
    }

    pub fn rank(&self) -> usize {
        self.projection.ncols()
    }

    /// Query features in the sketch's coordinates.
    pub fn map_queries(&self, keys: &FeatureMatrix, queries: &FeatureMatrix, hyper: &CacheHyper) -> Result<DMatrix<f64>> {
        ensure_dim("query dim", keys.dim(), queries.dim())?;
        let fl = keys.as_matrix().select_rows(&self.landmarks);
        Ok(kernel_from_rows(queries.as_matrix(), &fl, hyper.kernel) * &self.projection)
    }
}

pub fn nystrom_readout(
    keys: &FeatureMatrix,
    labels: &LabelVector,
    queries: &FeatureMatrix,
    hyper: &CacheHyper,
    landmarks: usize,
    seed: u64,
) -> Result<GpReadout> {
    let sketch = NystromSketch::new(keys, labels, hyper, landmarks, seed)?;
    let zq = sketch.map_queries(keys, queries, hyper)?;
    low_rank_readout(&sketch.factor, &zq, &labels.one_hot(), hyper.sigma2)
}

/// Cache logits (variance-calibrated with `hyper.eta`) from a class-balanced
/// Nyström approximation with `landmarks` landmarks.
pub fn nystrom_logits(
    keys: &FeatureMatrix,
    labels: &LabelVector,
    queries: &FeatureMatrix,
    hyper: &CacheHyper,
    landmarks: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    Ok(nystrom_readout(keys, labels, queries, hyper, landmarks, seed)?.calibrated(hyper.eta))
}

/// One unit-norm mean key per class, labeled `0..c`.
pub fn class_prototypes(keys: &FeatureMatrix, labels: &LabelVector) -> Result<(FeatureMatrix, LabelVector)> {
    ensure_dim("keys vs labels", keys.rows(), labels.len())?;
    let c = labels.num_classes();
    let mut sums = DMatrix::zeros(c, keys.dim());
    let mut counts = vec![0usize; c];
    for i in 0..keys.rows() {
        let y = labels.get(i);
        let mut row = sums.row_mut(y);
        row += keys.as_matrix().row(i);
        counts[y] += 1;
    }
    if let Some(empty) = counts.iter().position(|&n| n == 0) {
        return Err(Error::invalid(format!("class {empty} has no keys")));
    }
    let protos = FeatureMatrix::normalized(sums)?;
    Ok((protos, LabelVector::new((0..c).collect(), c)?))
}

pub fn mean_prototype_readout(
    keys: &FeatureMatrix,
    labels: &LabelVector,
    queries: &FeatureMatrix,
    hyper: &CacheHyper,
) -> Result<GpReadout> {
    let (protos, ids) = class_prototypes(keys, labels)?;
    let model = build_cache(&protos, &ids, *hyper, None, None)?;
    gp_readout(&model, queries)
}

/// Exact GP cache logits (variance-calibrated with `hyper.eta`) on the
/// normalized class-mean keys.
pub fn mean_prototype_logits(
    keys: &FeatureMatrix,
    labels: &LabelVector,
    queries: &FeatureMatrix,
    hyper: &CacheHyper,
) -> Result<DMatrix<f64>> {
    Ok(mean_prototype_readout(keys, labels, queries, hyper)?.calibrated(hyper.eta))
}

/// A benchmarked method with its size parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ApproxMethod {
    Exact,
    Group(usize),
    Nystrom(usize),
    Rff(usize),
    Mean,
}

impl ApproxMethod {
    pub fn name(&self) -> &'static str {
        match self {
            ApproxMethod::Exact => "exact",
            ApproxMethod::Group(_) => "group",
            ApproxMethod::Nystrom(_) => "nystrom",
            ApproxMethod::Rff(_) => "rff",
            ApproxMethod::Mean => "mean",
        }
    }

    pub fn param(&self) -> Option<usize> {
        match *self {
            ApproxMethod::Group(p) | ApproxMethod::Nystrom(p) | ApproxMethod::Rff(p) => Some(p),
            ApproxMethod::Exact | ApproxMethod::Mean => None,
        }
    }
}

impl fmt::Display for ApproxMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.param() {
            Some(p) => write!(f, "{}:{p}", self.name()),
            None => f.write_str(self.name()),
        }
    }
}

/// Parses `exact`, `mean`, `group:G`, `nystrom:L` or `rff:D`.
impl FromStr for ApproxMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, param) = match s.split_once(':') {
            Some((n, p)) => {
                let p = p
                    .parse::<usize>()
                    .map_err(|_| Error::invalid(format!("bad method parameter in `{s}`")))?;
                (n, Some(p))
            }
            None => (s, None),
        };
        match (name, param) {
            ("exact", None) => Ok(ApproxMethod::Exact),
            ("mean", None) => Ok(ApproxMethod::Mean),
            ("group", Some(p)) => Ok(ApproxMethod::Group(p)),
            ("nystrom", Some(p)) => Ok(ApproxMethod::Nystrom(p)),
            ("rff", Some(p)) => Ok(ApproxMethod::Rff(p)),
            _ => Err(Error::invalid(format!(
                "unknown method `{s}` (expected exact, mean, group:G, nystrom:L or rff:D)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: String,
    pub param: Option<usize>,
    pub seed: u64,
    pub accuracy: f64,
    pub build_ms: f64,
    pub query_ms: f64,
}

pub const BENCH_CSV_HEADER: &str = "method,param,seed,accuracy,build_ms,query_ms";

impl BenchRow {
    pub fn csv_line(&self) -> String {
        let param = self.param.map(|p| p.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{:.6},{:.3},{:.3}",
            self.method, param, self.seed, self.accuracy, self.build_ms, self.query_ms
        )
    }
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(BENCH_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

/// Build-phase state of one method. Everything that depends only on the
/// keys lives here so the query phase is timed on its own.
enum Built {
    Exact(crate::cache::CacheModel),
    LowRank {
        lower: DMatrix<f64>,
        sigma2: f64,
        z: DMatrix<f64>,
        weights: DMatrix<f64>,
        query_map: Box<dyn Fn(&FeatureMatrix) -> Result<DMatrix<f64>>>,
    },
}

fn build_method(
    method: ApproxMethod,
    keys: &FeatureMatrix,
    labels: &LabelVector,
    hyper: &CacheHyper,
    seed: u64,
) -> Result<Built> {
    match method {
        ApproxMethod::Exact => Ok(Built::Exact(build_cache(keys, labels, *hyper, None, None)?)),
        ApproxMethod::Group(g) => {
            let p = make_partition(labels.num_classes(), g, seed)?;
            Ok(Built::Exact(build_cache(keys, labels, *hyper, None, Some(&p))?))
        }
        ApproxMethod::Mean => {
            let (protos, ids) = class_prototypes(keys, labels)?;
            Ok(Built::Exact(build_cache(&protos, &ids, *hyper, None, None)?))
        }
        ApproxMethod::Nystrom(l) => {
            let sketch = NystromSketch::new(keys, labels, hyper, l, seed)?;
            let fl = keys.as_matrix().select_rows(&sketch.landmarks);
            let proj = sketch.projection.clone();
            let kernel = hyper.kernel;
            let map = move |q: &FeatureMatrix| Ok(kernel_from_rows(q.as_matrix(), &fl, kernel) * &proj);
            low_rank_built(sketch.factor, labels, hyper.sigma2, Box::new(map))
        }
        ApproxMethod::Rff(d) => {
            let rff = RffMap::new(keys.dim(), d, hyper.beta(), seed)?;
            let z = rff.map(keys.as_matrix())?;
            let map = move |q: &FeatureMatrix| rff.map(q.as_matrix());
            low_rank_built(z, labels, hyper.sigma2, Box::new(map))
        }
    }
}

fn low_rank_built(
    z: DMatrix<f64>,
    labels: &LabelVector,
    sigma2: f64,
    query_map: Box<dyn Fn(&FeatureMatrix) -> Result<DMatrix<f64>>>,
) -> Result<Built> {
    let y = labels.one_hot();
    let (n, r) = z.shape();
    let (lower, used, weights) = if r <= n {
        let (lower, used) = factor_spd(&z.tr_mul(&z), sigma2, 0)?;
        let w = chol_solve(&lower, &z.tr_mul(&y));
        (lower, used, w)
    } else {
        let (lower, used) = factor_spd(&(&z * z.transpose()), sigma2, 0)?;
        let w = chol_solve(&lower, &y);
        (lower, used, w)
    };
    Ok(Built::LowRank {
        lower,
        sigma2: used,
        z,
        weights,
        query_map,
    })
}

fn query_method(built: &Built, queries: &FeatureMatrix) -> Result<GpReadout> {
    match built {
        Built::Exact(model) => gp_readout(model, queries),
        Built::LowRank {
            lower,
            sigma2,
            z,
            weights,
            query_map,
        } => {
            let zq = query_map(queries)?;
            let (n, r) = z.shape();
            let m = zq.nrows();
            let (mean, var): (DMatrix<f64>, Vec<f64>) = if r <= n {
                let half = lower_solve(lower, &zq.transpose());
                let var = (0..m)
                    .map(|i| (1.0 - zq.row(i).norm_squared() + sigma2 * half.column(i).norm_squared()).max(0.0))
                    .collect();
                (&zq * weights, var)
            } else {
                let kq = &zq * z.transpose();
                let half = lower_solve(lower, &kq.transpose());
                let var = half.column_iter().map(|c| (1.0 - c.norm_squared()).max(0.0)).collect();
                (kq * weights, var)
            };
            Ok(GpReadout {
                variance: DMatrix::from_vec(m, 1, var),
                class_group: vec![0; mean.ncols()],
                mean,
            })
        }
    }
}

/// Times every method `repeats` times on the test split. Repeat `t` uses
/// seed `seed + t` for the method's own randomness (partition, landmarks,
/// feature map), so one row is emitted per method and repeat.
pub fn bench_approx(
    bundle: &FeatureBundle,
    hyper: &CacheHyper,
    methods: &[ApproxMethod],
    repeats: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    if repeats == 0 {
        return Err(Error::invalid("repeats must be at least 1"));
    }
    let train = &bundle.train;
    let test = &bundle.test;
    let zs = zero_shot_logits(&bundle.weights, &test.x)?;
    let mut rows = Vec::with_capacity(methods.len() * repeats);
    for &method in methods {
        for t in 0..repeats {
            let run_seed = seed.wrapping_add(t as u64);
            let start = Instant::now();
            let built = build_method(method, &train.x, &train.y, hyper, run_seed)?;
            let build_ms = start.elapsed().as_secs_f64() * 1e3;

            let start = Instant::now();
            let cache = query_method(&built, &test.x)?.calibrated(hyper.eta);
            let logits = &zs + cache * hyper.alpha;
            let pred = LabelVector::new(argmax_rows(&logits), bundle.num_classes())?;
            let query_ms = start.elapsed().as_secs_f64() * 1e3;

            let acc = accuracy(&pred, &test.y)?;
            log::info!("{method} seed {run_seed}: accuracy {acc:.4}, build {build_ms:.1} ms, query {query_ms:.1} ms");
            rows.push(BenchRow {
                method: method.name().to_string(),
                param: method.param(),
                seed: run_seed,
                accuracy: acc,
                build_ms,
                query_ms,
            });
        }
    }
    Ok(rows)
}

/// Per-method aggregate over repeats: mean accuracy and median timings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub method: String,
    pub param: Option<usize>,
    pub mean_accuracy: f64,
    pub median_build_ms: f64,
    pub median_query_ms: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn summarize_bench(rows: &[BenchRow]) -> Vec<BenchSummary> {
    let mut keys: Vec<(String, Option<usize>)> = Vec::new();
    for r in rows {
        let k = (r.method.clone(), r.param);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(method, param)| {
            let sel: Vec<&BenchRow> = rows.iter().filter(|r| r.method == method && r.param == param).collect();
            BenchSummary {
                mean_accuracy: sel.iter().map(|r| r.accuracy).sum::<f64>() / sel.len() as f64,
                median_build_ms: median(sel.iter().map(|r| r.build_ms).collect()),
                median_query_ms: median(sel.iter().map(|r| r.query_ms).collect()),
                method,
                param,
            }
        })
        .collect()
}
