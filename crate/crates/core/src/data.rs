//! Datasets, labeled/unlabeled pools, the labeling oracle, synthetic
//! generators and CSV ingestion.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{shuffle_indices, Matrix, Rng};

/// Per-column affine standardization `(x − mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fits column means and population standard deviations. Constant columns get std 1.
    pub fn fit(x: &Matrix) -> Self {
        let n = x.rows().max(1) as f64;
        let mean: Vec<f64> = x.column_sums().iter().map(|s| s / n).collect();
        let mut var = vec![0.0; x.cols()];
        for row in x.iter_rows() {
            for ((v, m), r) in var.iter_mut().zip(&mean).zip(row) {
                *v += (r - m) * (r - m);
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    pub fn apply(&self, x: &mut Matrix) {
        for r in 0..x.rows() {
            for ((v, m), s) in x.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Original label value for each class index.
    pub class_names: Vec<String>,
    pub feature_names: Vec<String>,
    /// Set once the features have been standardized.
    pub standardization: Option<Standardizer>,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let class_names = (0..num_classes).map(|c| c.to_string()).collect();
        let feature_names = (0..features.cols()).map(|c| format!("x{c}")).collect();
        let ds = Dataset {
            features,
            labels,
            num_classes,
            class_names,
            feature_names,
            standardization: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        if self.features.rows() != self.labels.len() {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                left: self.features.shape(),
                right: (self.labels.len(), 1),
            });
        }
        if self.labels.is_empty() {
            return Err(Error::config("dataset has no samples"));
        }
        if self.num_classes < 2 {
            return Err(Error::config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if let Some(&label) = self.labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                num_classes: self.num_classes,
            });
        }
        if self.class_names.len() != self.num_classes || self.feature_names.len() != self.features.cols() {
            return Err(Error::config("dataset names do not match its shape"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Rows at `indices`, keeping class and feature names.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.gather_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            class_names: self.class_names.clone(),
            feature_names: self.feature_names.clone(),
            standardization: self.standardization.clone(),
        }
    }

    /// Standardizes the features in place with statistics fit on this dataset.
    pub fn standardize(&mut self) {
        let s = Standardizer::fit(&self.features);
        s.apply(&mut self.features);
        self.standardization = Some(s);
    }

    pub fn apply_standardizer(&mut self, s: &Standardizer) {
        s.apply(&mut self.features);
        self.standardization = Some(s.clone());
    }

    pub fn labeled_data(&self) -> LabeledData {
        LabeledData {
            x: self.features.clone(),
            y: self.labels.clone(),
        }
    }

    /// Writes a header row (feature names, then `label_column`) and one row per sample.
    pub fn write_csv(&self, path: &Path, label_column: &str) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        let header: Vec<&str> = self
            .feature_names
            .iter()
            .map(String::as_str)
            .chain(std::iter::once(label_column))
            .collect();
        w.write_record(&header).map_err(|e| csv_err(path, e))?;
        for (row, &y) in self.features.iter_rows().zip(&self.labels) {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            rec.push(self.class_names[y].clone());
            w.write_record(&rec).map_err(|e| csv_err(path, e))?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

/// Features with their labels, as seen by training.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledData {
    pub x: Matrix,
    pub y: Vec<usize>,
}

impl LabeledData {
    pub fn new(x: Matrix, y: Vec<usize>, num_classes: usize) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::ShapeMismatch {
                op: "labeled data",
                left: x.shape(),
                right: (y.len(), 1),
            });
        }
        if let Some(&label) = y.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        Ok(LabeledData { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Ground-truth label lookup.
#[derive(Debug, Clone, Copy)]
pub struct Oracle<'a> {
    labels: &'a [usize],
}

impl<'a> Oracle<'a> {
    pub fn new(dataset: &'a Dataset) -> Self {
        Oracle {
            labels: &dataset.labels,
        }
    }

    pub fn label(&self, index: usize) -> Option<usize> {
        self.labels.get(index).copied()
    }
}

/// Serializable pool partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSnapshot {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

/// Partition of a training set into labeled and unlabeled indices.
///
/// Labels are held only for the labeled part; they enter through the oracle.
#[derive(Debug, Clone)]
pub struct Pool {
    train: Arc<Dataset>,
    labeled: BTreeMap<usize, usize>,
    unlabeled: BTreeSet<usize>,
}

impl Pool {
    /// Labels `initial` through the oracle; every other index starts unlabeled.
    pub fn new(train: Arc<Dataset>, initial: &[usize]) -> Result<Self> {
        let mut pool = Pool {
            unlabeled: (0..train.len()).collect(),
            labeled: BTreeMap::new(),
            train,
        };
        let train = Arc::clone(&pool.train);
        pool.transfer(initial, &Oracle::new(&train))?;
        Ok(pool)
    }

    pub fn from_snapshot(train: Arc<Dataset>, snap: &PoolSnapshot) -> Result<Self> {
        let pool = Pool::new(train, &snap.labeled)?;
        let expected: BTreeSet<usize> = snap.unlabeled.iter().copied().collect();
        if expected != pool.unlabeled || expected.len() != snap.unlabeled.len() {
            return Err(Error::config(
                "pool snapshot is not a partition of the training set",
            ));
        }
        Ok(pool)
    }

    pub fn snapshot(&self) -> PoolSnapshot {
        PoolSnapshot {
            labeled: self.labeled_indices(),
            unlabeled: self.unlabeled_indices(),
        }
    }

    pub fn train(&self) -> &Arc<Dataset> {
        &self.train
    }

    pub fn train_size(&self) -> usize {
        self.train.len()
    }

    pub fn num_labeled(&self) -> usize {
        self.labeled.len()
    }

    pub fn num_unlabeled(&self) -> usize {
        self.unlabeled.len()
    }

    pub fn labeled_fraction(&self) -> f64 {
        self.labeled.len() as f64 / self.train.len() as f64
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        self.labeled.keys().copied().collect()
    }

    pub fn unlabeled_indices(&self) -> Vec<usize> {
        self.unlabeled.iter().copied().collect()
    }

    /// Labeled features and oracle-provided labels in ascending index order.
    pub fn labeled_data(&self) -> LabeledData {
        let idx = self.labeled_indices();
        LabeledData {
            x: self.train.features.gather_rows(&idx),
            y: self.labeled.values().copied().collect(),
        }
    }

    /// Unlabeled features in ascending index order, i.e. row `k` is `unlabeled_indices()[k]`.
    pub fn unlabeled_features(&self) -> Matrix {
        self.train.features.gather_rows(&self.unlabeled_indices())
    }

    /// Moves `selected` from the unlabeled to the labeled set. Either every
    /// index moves or none does.
    pub fn transfer(&mut self, selected: &[usize], oracle: &Oracle<'_>) -> Result<()> {
        let mut seen = BTreeSet::new();
        for &i in selected {
            if !seen.insert(i) {
                return Err(Error::DuplicateIndex(i));
            }
            if !self.unlabeled.contains(&i) {
                return Err(Error::NotUnlabeled(i));
            }
        }
        for &i in selected {
            let y = oracle.label(i).ok_or(Error::NotUnlabeled(i))?;
            self.unlabeled.remove(&i);
            self.labeled.insert(i, y);
        }
        Ok(())
    }

    /// True if the labeled and unlabeled sets are disjoint and cover the training set.
    pub fn is_partition(&self) -> bool {
        self.labeled.len() + self.unlabeled.len() == self.train.len()
            && self.labeled.keys().all(|i| !self.unlabeled.contains(i))
            && self.labeled.keys().chain(&self.unlabeled).all(|&i| i < self.train.len())
    }
}

fn check_generator(cond: bool, msg: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::config(msg.to_owned()))
    }
}

/// Isotropic Gaussian clusters, one per class. Without explicit centers the
/// classes sit evenly on a circle of radius 2 in the plane.
pub fn make_blobs(n_per_class: usize, num_classes: usize, centers: Option<&Matrix>, spread: f64, rng: &mut Rng) -> Result<Dataset> {
    check_generator(n_per_class >= 1, "n_per_class must be >= 1")?;
    check_generator(num_classes >= 2, "need at least 2 classes")?;
    check_generator(spread >= 0.0 && spread.is_finite(), "spread must be finite and >= 0")?;
    let centers = match centers {
        Some(c) => {
            check_generator(c.rows() == num_classes && c.cols() >= 1, "need one center row per class")?;
            c.clone()
        }
        None => {
            let rows: Vec<[f64; 2]> = (0..num_classes)
                .map(|k| {
                    let a = 2.0 * PI * k as f64 / num_classes as f64;
                    [2.0 * a.cos(), 2.0 * a.sin()]
                })
                .collect();
            Matrix::from_rows(&rows)?
        }
    };
    let d = centers.cols();
    let n = n_per_class * num_classes;
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for k in 0..num_classes {
        for _ in 0..n_per_class {
            for &c in centers.row(k) {
                data.push(c + spread * rng.normal());
            }
            labels.push(k);
        }
    }
    Dataset::new(Matrix::from_vec(n, d, data)?, labels, num_classes)
}

fn linspace(n: usize, end: f64, endpoint: bool) -> impl Iterator<Item = f64> {
    let denom = if endpoint { n.saturating_sub(1).max(1) } else { n.max(1) } as f64;
    (0..n).map(move |i| end * i as f64 / denom)
}

fn two_curves(n: usize, noise: f64, rng: &mut Rng, curve: impl Fn(usize, usize, usize) -> [f64; 2]) -> Result<Dataset> {
    check_generator(n >= 2, "need at least 2 samples")?;
    check_generator(noise >= 0.0 && noise.is_finite(), "noise must be finite and >= 0")?;
    let n_out = n / 2;
    let n_in = n - n_out;
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for (label, count) in [(0, n_out), (1, n_in)] {
        for i in 0..count {
            let [a, b] = curve(label, i, count);
            data.push(a + noise * rng.normal());
            data.push(b + noise * rng.normal());
            labels.push(label);
        }
    }
    Dataset::new(Matrix::from_vec(n, 2, data)?, labels, 2)
}

/// Two interleaving half circles.
pub fn make_moons(n: usize, noise: f64, rng: &mut Rng) -> Result<Dataset> {
    two_curves(n, noise, rng, |label, i, count| {
        let t = linspace(count, PI, true).nth(i).unwrap();
        if label == 0 {
            [t.cos(), t.sin()]
        } else {
            [1.0 - t.cos(), 0.5 - t.sin()]
        }
    })
}

/// Two concentric circles of radius 1 (class 0) and 0.5 (class 1).
pub fn make_rings(n: usize, noise: f64, rng: &mut Rng) -> Result<Dataset> {
    two_curves(n, noise, rng, |label, i, count| {
        let t = linspace(count, 2.0 * PI, false).nth(i).unwrap();
        let r = if label == 0 { 1.0 } else { 0.5 };
        [r * t.cos(), r * t.sin()]
    })
}

/// Reads a headered, comma-separated file. Every column except `label_column`
/// must be numeric. Integer labels map to class indices in ascending numeric
/// order; any other labels map in order of first appearance.
pub fn load_csv(path: &Path, label_column: &str, standardize: bool) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let header = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.is_empty() {
        return Err(csv_err(path, "empty file"));
    }
    let label_pos = header
        .iter()
        .position(|h| h.trim() == label_column)
        .ok_or_else(|| csv_err(path, format!("no column named `{label_column}`")))?;
    let feature_names: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != label_pos)
        .map(|(_, h)| h.trim().to_owned())
        .collect();

    let mut data = Vec::new();
    let mut raw_labels = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != header.len() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        for (col, cell) in rec.iter().enumerate() {
            if col == label_pos {
                raw_labels.push(cell.trim().to_owned());
                continue;
            }
            let v: f64 = cell.trim().parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("column `{}`: `{cell}` is not a finite number", header[col].trim()),
            })?;
            data.push(v);
        }
    }
    if raw_labels.is_empty() {
        return Err(csv_err(path, "no data rows"));
    }

    let (labels, class_names) = map_labels(&raw_labels);
    let n = labels.len();
    let features = Matrix::from_vec(n, feature_names.len(), data)?;
    let num_classes = class_names.len();
    let mut ds = Dataset {
        features,
        labels,
        num_classes,
        class_names,
        feature_names,
        standardization: None,
    };
    ds.validate().map_err(|e| csv_err(path, e))?;
    if standardize {
        ds.standardize();
    }
    Ok(ds)
}

fn map_labels(raw: &[String]) -> (Vec<usize>, Vec<String>) {
    let ints: Option<Vec<i64>> = raw.iter().map(|s| s.parse().ok()).collect();
    if let Some(ints) = ints {
        let mut uniq = ints.clone();
        uniq.sort_unstable();
        uniq.dedup();
        let labels = ints.iter().map(|v| uniq.binary_search(v).expect("present")).collect();
        return (labels, uniq.iter().map(i64::to_string).collect());
    }
    let mut names: Vec<String> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    let labels = raw
        .iter()
        .map(|s| {
            *index.entry(s.as_str()).or_insert_with(|| {
                names.push(s.clone());
                names.len() - 1
            })
        })
        .collect();
    (labels, names)
}

/// Largest-remainder apportionment of `total` across groups of the given sizes.
/// Ties go to the lower group index; no group receives more than its size.
pub(crate) fn apportion(total: usize, sizes: &[usize]) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    if n == 0 {
        return vec![0; sizes.len()];
    }
    let total = total.min(n);
    let mut out: Vec<usize> = sizes.iter().map(|&s| total * s / n).collect();
    let mut rem: Vec<(usize, usize)> = sizes
        .iter()
        .enumerate()
        .map(|(i, &s)| ((total * s) % n, i))
        .collect();
    rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut left = total - out.iter().sum::<usize>();
    for &(_, i) in rem.iter().cycle() {
        if left == 0 {
            break;
        }
        if out[i] < sizes[i] {
            out[i] += 1;
            left -= 1;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub initial_fraction: f64,
    pub test_fraction: f64,
    pub stratified: bool,
    /// Fit standardization on the training rows and apply it to both parts.
    pub standardize: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            initial_fraction: 0.10,
            test_fraction: 0.20,
            stratified: true,
            standardize: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    pub pool: Pool,
    pub test: Dataset,
    /// Row of the source dataset behind each training index.
    pub train_rows: Vec<usize>,
    /// Row of the source dataset behind each test index.
    pub test_rows: Vec<usize>,
}

/// Splits off a test set and seeds the labeled pool with
/// `round(initial_fraction × train size)` training samples.
pub fn initial_split(dataset: &Dataset, cfg: &SplitConfig, rng: &mut Rng) -> Result<Split> {
    for (name, v) in [("initial_fraction", cfg.initial_fraction), ("test_fraction", cfg.test_fraction)] {
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::config(format!("{name} must lie in (0, 1), got {v}")));
        }
    }
    let n = dataset.len();
    let n_test = (cfg.test_fraction * n as f64).round() as usize;
    if n_test == 0 || n_test >= n {
        return Err(Error::config(format!(
            "test_fraction {} leaves {n_test} of {n} samples for testing",
            cfg.test_fraction
        )));
    }
    let n_train = n - n_test;
    let n_labeled = (cfg.initial_fraction * n_train as f64).round() as usize;
    if n_labeled == 0 {
        return Err(Error::config(format!(
            "initial_fraction {} labels no samples out of {n_train}",
            cfg.initial_fraction
        )));
    }

    let (mut test_rows, mut train_rows, labeled_rows): (Vec<usize>, Vec<usize>, Vec<usize>);
    if cfg.stratified {
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
        for (i, &y) in dataset.labels.iter().enumerate() {
            by_class[y].push(i);
        }
        for members in by_class.iter_mut() {
            let perm = shuffle_indices(members.len(), rng);
            *members = perm.iter().map(|&p| members[p]).collect();
        }
        let sizes: Vec<usize> = by_class.iter().map(Vec::len).collect();
        let test_quota = apportion(n_test, &sizes);
        let train_sizes: Vec<usize> = sizes.iter().zip(&test_quota).map(|(s, t)| s - t).collect();
        let labeled_quota = apportion(n_labeled, &train_sizes);
        let (mut te, mut tr, mut la) = (Vec::new(), Vec::new(), Vec::new());
        for ((members, &t), &l) in by_class.iter().zip(&test_quota).zip(&labeled_quota) {
            te.extend_from_slice(&members[..t]);
            tr.extend_from_slice(&members[t..]);
            la.extend_from_slice(&members[t..t + l]);
        }
        (test_rows, train_rows, labeled_rows) = (te, tr, la);
    } else {
        let perm = shuffle_indices(n, rng);
        test_rows = perm[..n_test].to_vec();
        train_rows = perm[n_test..].to_vec();
        let inner = shuffle_indices(n_train, rng);
        labeled_rows = inner[..n_labeled].iter().map(|&k| train_rows[k]).collect();
    }
    test_rows.sort_unstable();
    train_rows.sort_unstable();

    let mut train = dataset.subset(&train_rows);
    let mut test = dataset.subset(&test_rows);
    if cfg.standardize {
        let s = Standardizer::fit(&train.features);
        train.apply_standardizer(&s);
        test.apply_standardizer(&s);
    }
    let position: HashMap<usize, usize> = train_rows.iter().enumerate().map(|(k, &r)| (r, k)).collect();
    let mut initial: Vec<usize> = labeled_rows.iter().map(|r| position[r]).collect();
    initial.sort_unstable();
    let pool = Pool::new(Arc::new(train), &initial)?;
    Ok(Split {
        pool,
        test,
        train_rows,
        test_rows,
    })
}
