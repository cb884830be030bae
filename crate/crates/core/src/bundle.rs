//! Feature bundles: unit-norm feature matrices, labels and zero-shot weights,
//! plus the little-endian on-disk format and the synthetic generator.
//!
//! Matrix files start with the magic `GPCB`, a `u32` version, `u64` rows,
//! `u64` cols and a `u8` dtype tag (1 = f32), followed by row-major f32
//! values. Label files use the magic `GPCL`, a `u32` version, `u64` rows,
//! `u64` class count and then one `u32` per row. A `manifest.json` maps
//! roles to file names.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};

/// Rows further than this from unit norm are rejected on load.
pub const NORM_TOLERANCE: f64 = 1e-4;

/// Rows (or columns) this close to unit norm are kept verbatim instead of
/// being re-normalized. f32 storage rounding stays well inside it, which
/// makes a write/read cycle a fixed point.
pub const STORAGE_SLACK: f64 = 1e-6;

/// Divisor that brings a vector of the given norm back to unit length, or
/// `None` when it is already unit up to storage rounding.
fn renorm(norm: f64) -> Option<f64> {
    ((norm - 1.0).abs() > STORAGE_SLACK).then_some(norm)
}

pub const MATRIX_MAGIC: &[u8; 4] = b"GPCB";
pub const LABEL_MAGIC: &[u8; 4] = b"GPCL";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Row-major view of a set of L2-normalized feature vectors, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: DMatrix<f64>,
}

impl FeatureMatrix {
    /// Validates finiteness and unit norm (within [`NORM_TOLERANCE`]) and
    /// re-normalizes rows that are off by more than [`STORAGE_SLACK`].
    pub fn new(mut data: DMatrix<f64>) -> Result<Self> {
        if data.ncols() == 0 {
            return Err(Error::invalid("feature dimension must be positive"));
        }
        for i in 0..data.nrows() {
            for j in 0..data.ncols() {
                if !data[(i, j)].is_finite() {
                    return Err(Error::NonFinite { row: i, col: j });
                }
            }
            let norm = data.row(i).norm();
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(Error::NormViolation {
                    row: i,
                    norm,
                    tol: NORM_TOLERANCE,
                });
            }
            if let Some(norm) = renorm(norm) {
                let mut row = data.row_mut(i);
                row /= norm;
            }
        }
        Ok(Self { data })
    }

    /// Normalizes arbitrary nonzero rows onto the unit sphere.
    pub fn normalized(mut data: DMatrix<f64>) -> Result<Self> {
        if data.ncols() == 0 {
            return Err(Error::invalid("feature dimension must be positive"));
        }
        for i in 0..data.nrows() {
            let norm = data.row(i).norm();
            if !norm.is_finite() || norm == 0.0 {
                return Err(Error::invalid(format!("row {i} cannot be normalized (norm {norm})")));
            }
            let mut row = data.row_mut(i);
            row /= norm;
        }
        Ok(Self { data })
    }

    pub fn from_row_slice(rows: usize, dim: usize, values: &[f64]) -> Result<Self> {
        if values.len() != rows * dim {
            return Err(Error::invalid(format!(
                "expected {} values for a {rows}x{dim} matrix, got {}",
                rows * dim,
                values.len()
            )));
        }
        Self::new(DMatrix::from_row_slice(rows, dim, values))
    }

    /// Wraps rows that are unit-norm by construction.
    pub(crate) fn from_unit_rows(data: DMatrix<f64>) -> Self {
        debug_assert!(data.ncols() > 0);
        Self { data }
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            data: DMatrix::zeros(0, dim),
        }
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.data.row(i).iter().copied().collect()
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self {
            data: self.data.select_rows(idx),
        }
    }

    /// Rounds through f32 storage, giving the exact values a write/read
    /// cycle produces.
    pub fn to_storage_precision(&self) -> Self {
        let mut data = self.data.map(|x| x as f32 as f64);
        for i in 0..data.nrows() {
            if let Some(norm) = renorm(data.row(i).norm()) {
                let mut row = data.row_mut(i);
                row /= norm;
            }
        }
        Self { data }
    }
}

/// Integer class index per row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector {
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabelVector {
    pub fn new(labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::invalid("num_classes must be positive"));
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                row,
                label,
                num_classes,
            });
        }
        Ok(Self {
            labels,
            num_classes,
        })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// Binary label matrix with exactly one 1 per row.
    pub fn one_hot(&self) -> DMatrix<f64> {
        let mut y = DMatrix::zeros(self.labels.len(), self.num_classes);
        for (i, &l) in self.labels.iter().enumerate() {
            y[(i, l)] = 1.0;
        }
        y
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }
}

/// Zero-shot classifier weights, `dim x c`, one unit column per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotWeights {
    matrix: DMatrix<f64>,
}

impl ZeroShotWeights {
    pub fn new(mut matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() == 0 || matrix.ncols() == 0 {
            return Err(Error::invalid("zero-shot weights must be non-empty"));
        }
        for j in 0..matrix.ncols() {
            for i in 0..matrix.nrows() {
                if !matrix[(i, j)].is_finite() {
                    return Err(Error::NonFinite { row: i, col: j });
                }
            }
            let norm = matrix.column(j).norm();
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(Error::ColumnNormViolation {
                    col: j,
                    norm,
                    tol: NORM_TOLERANCE,
                });
            }
            if let Some(norm) = renorm(norm) {
                let mut col = matrix.column_mut(j);
                col /= norm;
            }
        }
        Ok(Self { matrix })
    }

    pub fn normalized(mut matrix: DMatrix<f64>) -> Result<Self> {
        for j in 0..matrix.ncols() {
            let norm = matrix.column(j).norm();
            if !norm.is_finite() || norm == 0.0 {
                return Err(Error::invalid(format!("column {j} cannot be normalized")));
            }
            let mut col = matrix.column_mut(j);
            col /= norm;
        }
        Self::new(matrix)
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn to_storage_precision(&self) -> Self {
        let mut matrix = self.matrix.map(|x| x as f32 as f64);
        for j in 0..matrix.ncols() {
            if let Some(norm) = renorm(matrix.column(j).norm()) {
                let mut col = matrix.column_mut(j);
                col /= norm;
            }
        }
        Self { matrix }
    }
}

/// Features plus labels for one split.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSplit {
    pub x: FeatureMatrix,
    pub y: LabelVector,
}

impl LabeledSplit {
    pub fn new(x: FeatureMatrix, y: LabelVector) -> Result<Self> {
        ensure_dim("split labels vs rows", x.rows(), y.len())?;
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub train: LabeledSplit,
    pub val: LabeledSplit,
    pub test: LabeledSplit,
    pub unlabeled: Option<FeatureMatrix>,
    pub unlabeled_augmented: Option<FeatureMatrix>,
    pub weights: ZeroShotWeights,
    pub class_names: Vec<String>,
}

/// The parts of a bundle hyperparameter search may look at. There is no
/// way to reach the test split from here.
#[derive(Debug, Clone, Copy)]
pub struct TuningView<'a> {
    pub train: &'a LabeledSplit,
    pub val: &'a LabeledSplit,
    pub weights: &'a ZeroShotWeights,
}

impl FeatureBundle {
    pub fn dim(&self) -> usize {
        self.weights.dim()
    }

    pub fn num_classes(&self) -> usize {
        self.weights.num_classes()
    }

    pub fn tuning_view(&self) -> TuningView<'_> {
        TuningView {
            train: &self.train,
            val: &self.val,
            weights: &self.weights,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.dim();
        let c = self.num_classes();
        for (ctx, split) in [
            ("train dim", &self.train),
            ("val dim", &self.val),
            ("test dim", &self.test),
        ] {
            ensure_dim(ctx, dim, split.x.dim())?;
            ensure_dim("split rows vs labels", split.x.rows(), split.y.len())?;
            ensure_dim("split num_classes", c, split.y.num_classes())?;
        }
        if let Some(u) = &self.unlabeled {
            ensure_dim("unlabeled dim", dim, u.dim())?;
        }
        match (&self.unlabeled, &self.unlabeled_augmented) {
            (Some(u), Some(a)) => {
                ensure_dim("unlabeled_aug dim", dim, a.dim())?;
                ensure_dim("unlabeled_aug rows", u.rows(), a.rows())?;
            }
            (None, Some(_)) => {
                return Err(Error::invalid("unlabeled_augmented present without unlabeled"));
            }
            _ => {}
        }
        ensure_dim("class_names", c, self.class_names.len())?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dim: usize,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub files: BTreeMap<String, String>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
            ErrorKind::NotFound => Error::MissingFile {
                role: "manifest".into(),
                path: path.clone(),
            },
            _ => Error::io(&path, e),
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Manifest {
            path,
            detail: e.to_string(),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn file_for(&self, dir: &Path, role: &str) -> Result<PathBuf> {
        let name = self.files.get(role).ok_or_else(|| Error::Manifest {
            path: dir.join(MANIFEST_FILE),
            detail: format!("no file for role `{role}`"),
        })?;
        let path = dir.join(name);
        if !path.is_file() {
            return Err(Error::MissingFile {
                role: role.to_string(),
                path,
            });
        }
        Ok(path)
    }
}

pub fn write_matrix_file(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    put(MATRIX_MAGIC)?;
    put(&FORMAT_VERSION.to_le_bytes())?;
    put(&(m.nrows() as u64).to_le_bytes())?;
    put(&(m.ncols() as u64).to_le_bytes())?;
    put(&[DTYPE_F32])?;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            put(&(m[(i, j)] as f32).to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn open_reader(path: &Path, role: &str) -> Result<BufReader<fs::File>> {
    match fs::File::open(path) {
        Ok(f) => Ok(BufReader::new(f)),
        Err(e) if e.kind() == ErrorKind::NotFound => Err(Error::MissingFile {
            role: role.to_string(),
            path: path.to_path_buf(),
        }),
        Err(e) => Err(Error::io(path, e)),
    }
}

fn read_exact_or_header(r: &mut impl Read, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => Error::Header {
            path: path.to_path_buf(),
            detail: format!("truncated while reading {what}"),
        },
        _ => Error::io(path, e),
    })
}

fn read_header(r: &mut impl Read, path: &Path, magic: &[u8; 4]) -> Result<(usize, usize)> {
    let mut m = [0u8; 4];
    read_exact_or_header(r, &mut m, path, "magic")?;
    if &m != magic {
        return Err(Error::Header {
            path: path.to_path_buf(),
            detail: format!(
                "magic {:?}, expected {:?}",
                String::from_utf8_lossy(&m),
                String::from_utf8_lossy(magic)
            ),
        });
    }
    let mut v = [0u8; 4];
    read_exact_or_header(r, &mut v, path, "version")?;
    let version = u32::from_le_bytes(v);
    if version != FORMAT_VERSION {
        return Err(Error::Header {
            path: path.to_path_buf(),
            detail: format!("unsupported version {version}"),
        });
    }
    let mut b = [0u8; 8];
    read_exact_or_header(r, &mut b, path, "rows")?;
    let rows = u64::from_le_bytes(b) as usize;
    read_exact_or_header(r, &mut b, path, "cols")?;
    let cols = u64::from_le_bytes(b) as usize;
    Ok((rows, cols))
}

/// Reads a matrix file into memory at f64 precision. Only finiteness is
/// checked here; norm checks belong to the typed wrappers.
pub fn read_matrix_file(path: &Path, role: &str) -> Result<DMatrix<f64>> {
    let mut r = open_reader(path, role)?;
    let (rows, cols) = read_header(&mut r, path, MATRIX_MAGIC)?;
    let mut tag = [0u8; 1];
    read_exact_or_header(&mut r, &mut tag, path, "dtype")?;
    if tag[0] != DTYPE_F32 {
        return Err(Error::Header {
            path: path.to_path_buf(),
            detail: format!("unsupported dtype tag {}", tag[0]),
        });
    }
    let mut raw = vec![0u8; rows * cols * 4];
    read_exact_or_header(&mut r, &mut raw, path, "data")?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::Header {
            path: path.to_path_buf(),
            detail: "trailing bytes after data".into(),
        });
    }
    let values: Vec<f64> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if let Some(k) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            row: k / cols.max(1),
            col: k % cols.max(1),
        });
    }
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

pub fn write_label_file(path: &Path, labels: &LabelVector) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    put(LABEL_MAGIC)?;
    put(&FORMAT_VERSION.to_le_bytes())?;
    put(&(labels.len() as u64).to_le_bytes())?;
    put(&(labels.num_classes() as u64).to_le_bytes())?;
    for &l in labels.labels() {
        put(&(l as u32).to_le_bytes())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_label_file(path: &Path, role: &str) -> Result<LabelVector> {
    let mut r = open_reader(path, role)?;
    let (rows, num_classes) = read_header(&mut r, path, LABEL_MAGIC)?;
    let mut raw = vec![0u8; rows * 4];
    read_exact_or_header(&mut r, &mut raw, path, "labels")?;
    let labels = raw
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    LabelVector::new(labels, num_classes)
}

const ROLES: [(&str, &str); 9] = [
    ("train_x", "train_x.gpcb"),
    ("train_y", "train_y.gpcl"),
    ("val_x", "val_x.gpcb"),
    ("val_y", "val_y.gpcl"),
    ("test_x", "test_x.gpcb"),
    ("test_y", "test_y.gpcl"),
    ("weights", "weights.gpcb"),
    ("unlabeled", "unlabeled.gpcb"),
    ("unlabeled_aug", "unlabeled_aug.gpcb"),
];

fn file_name(role: &str) -> &'static str {
    ROLES.iter().find(|(r, _)| *r == role).map(|(_, f)| *f).unwrap()
}

/// Writes one file per matrix plus `manifest.json`. Invariants are checked
/// before anything touches the disk.
pub fn write_bundle(bundle: &FeatureBundle, dir: &Path) -> Result<()> {
    bundle.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut files = BTreeMap::new();
    let mut matrix = |role: &str, m: &DMatrix<f64>| -> Result<()> {
        write_matrix_file(&dir.join(file_name(role)), m)?;
        files.insert(role.to_string(), file_name(role).to_string());
        Ok(())
    };
    matrix("train_x", bundle.train.x.as_matrix())?;
    matrix("val_x", bundle.val.x.as_matrix())?;
    matrix("test_x", bundle.test.x.as_matrix())?;
    matrix("weights", bundle.weights.as_matrix())?;
    if let Some(u) = &bundle.unlabeled {
        matrix("unlabeled", u.as_matrix())?;
    }
    if let Some(a) = &bundle.unlabeled_augmented {
        matrix("unlabeled_aug", a.as_matrix())?;
    }
    for (role, split) in [
        ("train_y", &bundle.train),
        ("val_y", &bundle.val),
        ("test_y", &bundle.test),
    ] {
        write_label_file(&dir.join(file_name(role)), &split.y)?;
        files.insert(role.to_string(), file_name(role).to_string());
    }

    // keep roles added by other commands (e.g. a saved calibration layer)
    if let Ok(old) = Manifest::load(dir) {
        for (role, name) in old.files {
            if !ROLES.iter().any(|(r, _)| *r == role) {
                files.insert(role, name);
            }
        }
    }

    Manifest {
        dim: bundle.dim(),
        num_classes: bundle.num_classes(),
        class_names: bundle.class_names.clone(),
        files,
    }
    .save(dir)
}

fn read_features(dir: &Path, manifest: &Manifest, role: &str) -> Result<FeatureMatrix> {
    let path = manifest.file_for(dir, role)?;
    let m = read_matrix_file(&path, role)?;
    FeatureMatrix::new(m)
}

pub fn read_bundle(dir: &Path) -> Result<FeatureBundle> {
    let manifest = Manifest::load(dir)?;
    let split = |xr: &str, yr: &str| -> Result<LabeledSplit> {
        let x = read_features(dir, &manifest, xr)?;
        let y = read_label_file(&manifest.file_for(dir, yr)?, yr)?;
        LabeledSplit::new(x, y)
    };
    let train = split("train_x", "train_y")?;
    let val = split("val_x", "val_y")?;
    let test = split("test_x", "test_y")?;
    let weights = ZeroShotWeights::new(read_matrix_file(
        &manifest.file_for(dir, "weights")?,
        "weights",
    )?)?;
    let optional = |role: &str| -> Result<Option<FeatureMatrix>> {
        if manifest.files.contains_key(role) {
            read_features(dir, &manifest, role).map(Some)
        } else {
            Ok(None)
        }
    };
    let unlabeled = optional("unlabeled")?;
    let unlabeled_augmented = optional("unlabeled_aug")?;

    let bundle = FeatureBundle {
        train,
        val,
        test,
        unlabeled,
        unlabeled_augmented,
        weights,
        class_names: manifest.class_names.clone(),
    };
    bundle.validate()?;
    ensure_dim("manifest dim", manifest.dim, bundle.dim())?;
    ensure_dim("manifest num_classes", manifest.num_classes, bundle.num_classes())?;
    Ok(bundle)
}

/// Parameters of the synthetic clustered-on-sphere dataset.
///
/// Noise is added per coordinate with standard deviation
/// `spread * noise_scale(dim)`, where the per-class and per-sample
/// multipliers are log-normal with the given jitters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub shots: usize,
    pub dim: usize,
    pub spread: f64,
    pub text_noise: f64,
    pub seed: u64,
    pub n_test_per_class: usize,
    pub n_val_per_class: usize,
    pub n_unlabeled_per_class: usize,
    pub class_jitter: f64,
    pub sample_jitter: f64,
    /// Rank of a nuisance subspace shared by all classes. When positive, a
    /// `nuisance_share` fraction of the within-class noise variance lies in
    /// it and augmented views are perturbed only along it.
    pub nuisance_rank: usize,
    pub nuisance_share: f64,
}

impl SyntheticConfig {
    pub fn new(classes: usize, shots: usize, dim: usize, spread: f64, seed: u64) -> Self {
        Self {
            classes,
            shots,
            dim,
            spread,
            text_noise: 0.3,
            seed,
            n_test_per_class: 50,
            n_val_per_class: 50,
            n_unlabeled_per_class: 32,
            class_jitter: 0.5,
            sample_jitter: 0.5,
            nuisance_rank: 0,
            nuisance_share: 0.5,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid("synthetic data needs at least 2 classes"));
        }
        if self.shots < 1 {
            return Err(Error::invalid("shots must be at least 1"));
        }
        if self.dim < 4 {
            return Err(Error::invalid("dim must be at least 4"));
        }
        if self.nuisance_rank > self.dim || self.nuisance_share > 1.0 {
            return Err(Error::invalid(format!(
                "nuisance rank must be <= dim and share <= 1, got {} and {}",
                self.nuisance_rank, self.nuisance_share
            )));
        }
        for (name, v) in [
            ("spread", self.spread),
            ("text_noise", self.text_noise),
            ("class_jitter", self.class_jitter),
            ("sample_jitter", self.sample_jitter),
            ("nuisance_share", self.nuisance_share),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-coordinate noise scale: keeps the expected noise norm at `4 * spread`
/// regardless of dimension.
fn noise_scale(dim: usize) -> f64 {
    4.0 / (dim as f64).sqrt()
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize) -> DVector<f64> {
    DVector::from_iterator(dim, (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

fn unit(v: DVector<f64>) -> DVector<f64> {
    let n = v.norm();
    v / n
}

/// Deterministic synthetic bundle; a pure function of `cfg`.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<FeatureBundle> {
    cfg.validate()?;
    let (c, dim) = (cfg.classes, cfg.dim);
    let scale = noise_scale(dim);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let centers: Vec<DVector<f64>> = (0..c).map(|_| unit(gaussian_vec(&mut rng, dim))).collect();
    let class_mult: Vec<f64> = (0..c)
        .map(|_| (cfg.class_jitter * rng.sample::<f64, _>(StandardNormal)).exp())
        .collect();
    let mut w = DMatrix::zeros(dim, c);
    for (j, center) in centers.iter().enumerate() {
        let col = unit(center + gaussian_vec(&mut rng, dim) * (cfg.text_noise * scale));
        w.set_column(j, &col);
    }

    let rank = cfg.nuisance_rank;
    let basis = (rank > 0).then(|| {
        let g = DMatrix::from_fn(dim, rank, |_, _| rng.sample::<f64, _>(StandardNormal));
        g.qr().q()
    });
    // a gaussian in the nuisance subspace with the same expected norm as a
    // full-dimensional one
    let nuisance = |rng: &mut ChaCha8Rng, b: &DMatrix<f64>| -> DVector<f64> {
        b * gaussian_vec(rng, rank) * (dim as f64 / rank as f64).sqrt()
    };
    let share = cfg.nuisance_share;

    let draw = |per_class: usize, rng: &mut ChaCha8Rng| -> (DMatrix<f64>, Vec<usize>) {
        let mut x = DMatrix::zeros(c * per_class, dim);
        let mut y = Vec::with_capacity(c * per_class);
        for (j, center) in centers.iter().enumerate() {
            for _ in 0..per_class {
                let s = class_mult[j] * (cfg.sample_jitter * rng.sample::<f64, _>(StandardNormal)).exp();
                let amp = cfg.spread * scale * s;
                let noise = match &basis {
                    None => gaussian_vec(rng, dim) * amp,
                    Some(b) => {
                        gaussian_vec(rng, dim) * (amp * (1.0 - share).sqrt()) + nuisance(rng, b) * (amp * share.sqrt())
                    }
                };
                let row = unit(center + noise);
                x.set_row(y.len(), &row.transpose());
                y.push(j);
            }
        }
        (x, y)
    };

    let mut split = |per_class: usize| -> Result<LabeledSplit> {
        let (x, y) = draw(per_class, &mut rng);
        LabeledSplit::new(
            FeatureMatrix::from_unit_rows(x).to_storage_precision(),
            LabelVector::new(y, c)?,
        )
    };
    let train = split(cfg.shots)?;
    let val = split(cfg.n_val_per_class)?;
    let test = split(cfg.n_test_per_class)?;

    let (unlabeled, unlabeled_augmented) = if cfg.n_unlabeled_per_class > 0 {
        let (u, _) = draw(cfg.n_unlabeled_per_class, &mut rng);
        let mut aug = DMatrix::zeros(u.nrows(), dim);
        for i in 0..u.nrows() {
            let delta = match &basis {
                None => gaussian_vec(&mut rng, dim),
                Some(b) => nuisance(&mut rng, b),
            };
            let row = unit(u.row(i).transpose() + delta * (cfg.spread * scale));
            aug.set_row(i, &row.transpose());
        }
        (
            Some(FeatureMatrix::from_unit_rows(u).to_storage_precision()),
            Some(FeatureMatrix::from_unit_rows(aug).to_storage_precision()),
        )
    } else {
        (None, None)
    };

    let bundle = FeatureBundle {
        train,
        val,
        test,
        unlabeled,
        unlabeled_augmented,
        weights: ZeroShotWeights::normalized(w)?.to_storage_precision(),
        class_names: (0..c).map(|j| format!("class_{j:03}")).collect(),
    };
    bundle.validate()?;
    Ok(bundle)
}
