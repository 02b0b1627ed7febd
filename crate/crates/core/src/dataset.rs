//! Datasets, class histograms, synthetic blobs and the CSV dataset format.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{FedError, Result};
use crate::rng::{stream, Purpose};

/// Tolerance on the sum of a [`ClassDistribution`].
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-9;

/// Dense feature matrix with integer class labels.
///
/// Rows are stored contiguously; `features[i * dim..(i + 1) * dim]` is example `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        dim: usize,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(FedError::param("feature_dim must be at least 1"));
        }
        if labels.is_empty() {
            return Err(FedError::param("dataset must contain at least one example"));
        }
        if num_classes == 0 {
            return Err(FedError::param("num_classes must be positive"));
        }
        if features.len() != labels.len() * dim {
            return Err(FedError::param(format!(
                "feature matrix holds {} values, expected {} rows x {} columns",
                features.len(),
                labels.len(),
                dim
            )));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= num_classes) {
            return Err(FedError::param(format!(
                "label {y} of example {i} is outside [0, {num_classes})"
            )));
        }
        Ok(Dataset {
            features,
            dim,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// Per-class example counts over the whole dataset.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Histogram of the full dataset.
    pub fn histogram(&self) -> ClassDistribution {
        ClassDistribution::from_counts(&self.class_counts()).expect("dataset is non-empty")
    }

    /// Stable content hash, used to tie a partition to the dataset it indexes.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |w: u64| {
            for b in w.to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        mix(self.dim as u64);
        mix(self.num_classes as u64);
        mix(self.labels.len() as u64);
        for &y in &self.labels {
            mix(y as u64);
        }
        for &x in &self.features {
            mix(x.to_bits());
        }
        h
    }

    /// Materializes the examples named by `subset`, in subset order.
    pub fn select(&self, subset: &IndexSet) -> Result<Dataset> {
        subset.validate_for(self)?;
        let mut features = Vec::with_capacity(subset.len() * self.dim);
        let mut labels = Vec::with_capacity(subset.len());
        for &i in subset.as_slice() {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(features, self.dim, labels, self.num_classes)
    }

    /// True if every feature value is finite.
    pub fn all_finite(&self) -> bool {
        self.features.iter().all(|x| x.is_finite())
    }
}

/// A discrete distribution over `C` classes.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassDistribution {
    probs: Vec<f64>,
}

impl ClassDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(FedError::param("distribution needs at least one class"));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(FedError::param(format!(
                "distribution entry {p} is not a non-negative real"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > DISTRIBUTION_TOLERANCE {
            return Err(FedError::param(format!(
                "distribution sums to {sum}, not 1"
            )));
        }
        Ok(ClassDistribution { probs })
    }

    /// Exact normalized histogram from integer counts.
    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(FedError::param(
                "cannot build a histogram from zero examples",
            ));
        }
        let n = total as f64;
        ClassDistribution::new(counts.iter().map(|&c| c as f64 / n).collect())
    }

    pub fn uniform(num_classes: usize) -> Self {
        assert!(num_classes > 0);
        ClassDistribution {
            probs: vec![1.0 / num_classes as f64; num_classes],
        }
    }

    pub fn one_hot(num_classes: usize, class: usize) -> Self {
        assert!(class < num_classes);
        let mut probs = vec![0.0; num_classes];
        probs[class] = 1.0;
        ClassDistribution { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    pub fn get(&self, class: usize) -> f64 {
        self.probs[class]
    }

    pub fn max_prob(&self) -> f64 {
        self.probs.iter().copied().fold(0.0, f64::max)
    }

    pub(crate) fn from_raw_unchecked(probs: Vec<f64>) -> Self {
        ClassDistribution { probs }
    }
}

/// Ordered list of example indices into a dataset.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct IndexSet(Vec<usize>);

impl IndexSet {
    pub fn new(indices: Vec<usize>) -> Self {
        IndexSet(indices)
    }

    /// `0..n` in order.
    pub fn all(n: usize) -> Self {
        IndexSet((0..n).collect())
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn into_vec(self) -> Vec<usize> {
        self.0
    }

    pub fn validate_for(&self, dataset: &Dataset) -> Result<()> {
        match self.0.iter().find(|&&i| i >= dataset.len()) {
            Some(i) => Err(FedError::param(format!(
                "index {i} out of range for dataset of {} examples",
                dataset.len()
            ))),
            None => Ok(()),
        }
    }
}

impl From<Vec<usize>> for IndexSet {
    fn from(v: Vec<usize>) -> Self {
        IndexSet(v)
    }
}

/// Label counts of `subset`.
pub fn class_counts(dataset: &Dataset, subset: &IndexSet) -> Result<Vec<usize>> {
    subset.validate_for(dataset)?;
    let mut counts = vec![0usize; dataset.num_classes()];
    for i in subset.iter() {
        counts[dataset.label(i)] += 1;
    }
    Ok(counts)
}

/// Empirical class distribution of the examples in `subset`.
pub fn class_histogram(dataset: &Dataset, subset: &IndexSet) -> Result<ClassDistribution> {
    if subset.is_empty() {
        return Err(FedError::param("class histogram of an empty subset"));
    }
    ClassDistribution::from_counts(&class_counts(dataset, subset)?)
}

/// Gaussian blob generator: one isotropic Gaussian per class.
///
/// Class means lie on a sphere of radius `2 * spread * sqrt(dim)` with
/// directions drawn from the seed. Several independent sample draws (for
/// instance train and test) can share one set of means.
#[derive(Clone, Debug)]
pub struct BlobSpec {
    num_classes: usize,
    dim: usize,
    spread: f64,
    seed: u64,
    means: Vec<f64>,
}

impl BlobSpec {
    pub fn new(num_classes: usize, dim: usize, spread: f64, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(FedError::param("blobs need at least 2 classes"));
        }
        if dim < 2 {
            return Err(FedError::param("blobs need feature_dim >= 2"));
        }
        if !(spread > 0.0 && spread.is_finite()) {
            return Err(FedError::param("blob spread must be a positive real"));
        }
        let radius = 2.0 * spread * (dim as f64).sqrt();
        let mut rng = stream(seed, Purpose::BlobMeans, 0, 0);
        let mut means = Vec::with_capacity(num_classes * dim);
        for _ in 0..num_classes {
            let dir: Vec<f64> = loop {
                let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    break v.into_iter().map(|x| x / norm).collect();
                }
            };
            means.extend(dir.into_iter().map(|x| x * radius));
        }
        Ok(BlobSpec {
            num_classes,
            dim,
            spread,
            seed,
            means,
        })
    }

    pub fn mean(&self, class: usize) -> &[f64] {
        &self.means[class * self.dim..(class + 1) * self.dim]
    }

    /// Draws `per_class` examples of every class from sample stream `draw`.
    /// Rows are class-major: all of class 0, then class 1, and so on.
    pub fn sample(&self, per_class: usize, draw: u64) -> Result<Dataset> {
        if per_class == 0 {
            return Err(FedError::param("per_class must be at least 1"));
        }
        let mut rng = stream(self.seed, Purpose::BlobSamples, draw, 0);
        let n = self.num_classes * per_class;
        let mut features = Vec::with_capacity(n * self.dim);
        let mut labels = Vec::with_capacity(n);
        for c in 0..self.num_classes {
            for _ in 0..per_class {
                for &m in self.mean(c) {
                    let z: f64 = rng.sample(StandardNormal);
                    features.push(m + self.spread * z);
                }
                labels.push(c);
            }
        }
        Dataset::new(features, self.dim, labels, self.num_classes)
    }
}

/// Class-balanced Gaussian blobs; a pure function of its arguments.
pub fn generate_blobs(
    num_classes: usize,
    per_class: usize,
    feature_dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    BlobSpec::new(num_classes, feature_dim, spread, seed)?.sample(per_class, 0)
}

/// Training blobs plus an independently drawn held-out set around the same means.
pub fn generate_blobs_with_holdout(
    num_classes: usize,
    per_class: usize,
    test_per_class: usize,
    feature_dim: usize,
    spread: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let spec = BlobSpec::new(num_classes, feature_dim, spread, seed)?;
    Ok((spec.sample(per_class, 0)?, spec.sample(test_per_class, 1)?))
}

/// Reads the CSV dataset format: a header `f0,...,f{d-1},label` then one row
/// per example. `num_classes` defaults to `max(label) + 1`.
pub fn load_csv(path: impl AsRef<Path>, num_classes: Option<usize>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| FedError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(file);
    let mut records = reader.records();

    let header = match records.next() {
        None => {
            return Err(FedError::format(
                path,
                1,
                "empty file, expected a header row",
            ))
        }
        Some(r) => r.map_err(|e| FedError::format(path, 1, e.to_string()))?,
    };
    let dim = header.len().saturating_sub(1);
    if dim == 0 || header.get(dim) != Some("label") {
        return Err(FedError::format(
            path,
            1,
            "header must be f0,...,f{d-1},label",
        ));
    }
    for (j, name) in header.iter().take(dim).enumerate() {
        if name != format!("f{j}") {
            return Err(FedError::format(
                path,
                1,
                format!("column {j} is named {name:?}, expected \"f{j}\""),
            ));
        }
    }

    let mut features = Vec::new();
    let mut labels = Vec::new();
    for record in records {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            FedError::format(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != dim + 1 {
            return Err(FedError::format(
                path,
                line,
                format!("expected {} fields, found {}", dim + 1, record.len()),
            ));
        }
        for j in 0..dim {
            let field = record[j].trim();
            let x: f64 = field.parse().map_err(|_| {
                FedError::format(
                    path,
                    line,
                    format!("feature f{j} {field:?} is not a real number"),
                )
            })?;
            features.push(x);
        }
        let raw = record[dim].trim();
        let y: usize = raw.parse().map_err(|_| {
            FedError::format(
                path,
                line,
                format!("label {raw:?} is not a non-negative integer"),
            )
        })?;
        if let Some(c) = num_classes {
            if y >= c {
                return Err(FedError::format(
                    path,
                    line,
                    format!("label {y} out of range for {c} classes"),
                ));
            }
        }
        labels.push(y);
    }
    if labels.is_empty() {
        return Err(FedError::format(path, 2, "no data rows"));
    }
    let c = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    Dataset::new(features, dim, labels, c)
}

/// Writes the CSV dataset format. Features use the shortest representation
/// that parses back to the same `f64`.
pub fn save_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| FedError::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| FedError::io(path, e);
    let header: Vec<String> = (0..dataset.dim()).map(|j| format!("f{j}")).collect();
    writeln!(out, "{},label", header.join(",")).map_err(io)?;
    for i in 0..dataset.len() {
        let row: Vec<String> = dataset.row(i).iter().map(|x| format!("{x:?}")).collect();
        writeln!(out, "{},{}", row.join(","), dataset.label(i)).map_err(io)?;
    }
    out.flush().map_err(io)
}
