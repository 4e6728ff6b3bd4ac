//! Datasets, synthetic cluster generation and forget/retain splits.

use std::borrow::Cow;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Labelled samples: `features` is `N x d`, labels are in `[0, classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: DMatrix<f64>,
    // samples as columns, for contiguous per-sample views
    columns: DMatrix<f64>,
    labels: Vec<usize>,
    classes: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(features: DMatrix<f64>, labels: Vec<usize>, classes: usize, name: impl Into<String>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidSpec("dataset must contain at least one sample".into()));
        }
        if features.nrows() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: labels.len(),
                got: features.nrows(),
            });
        }
        if features.ncols() == 0 {
            return Err(Error::InvalidSpec("samples need at least one feature".into()));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSpec("features must be finite".into()));
        }
        if let Some((line, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::LabelOutOfRange { line, label, classes });
        }
        Ok(Dataset {
            columns: features.transpose(),
            features,
            labels,
            classes,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> (nalgebra::DVectorView<'_, f64>, usize) {
        (self.columns.column(i), self.labels[i])
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    pub fn class_count(&self, class: usize) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    /// Copy of the samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Result<Dataset> {
        let features = DMatrix::from_fn(indices.len(), self.dim(), |r, c| self.features[(indices[r], c)]);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset::new(features, labels, self.classes, name)
    }

    /// Same features with replaced labels.
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Dataset> {
        Dataset::new(self.features.clone(), labels, self.classes, self.name.clone())
    }
}

/// One isotropic Gaussian blob of samples sharing a label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    pub mean: Vec<f64>,
    pub stddev: f64,
    pub count: usize,
    pub label: usize,
}

/// The synthetic two-class, three-cluster layout used for the logistic
/// regression experiment: class 0 is split across two clusters.
pub fn default_cluster_specs() -> Vec<ClusterSpec> {
    vec![
        ClusterSpec {
            mean: vec![-2.0, 0.0],
            stddev: 0.4,
            count: 100,
            label: 0,
        },
        ClusterSpec {
            mean: vec![0.0, 2.0],
            stddev: 0.4,
            count: 100,
            label: 0,
        },
        ClusterSpec {
            mean: vec![2.0, 0.0],
            stddev: 0.4,
            count: 100,
            label: 1,
        },
    ]
}

/// Draws every cluster in order; output is a pure function of `(specs, seed)`.
pub fn gen_clusters(specs: &[ClusterSpec], seed: u64) -> Result<Dataset> {
    let first = specs.first().ok_or_else(|| Error::InvalidSpec("no clusters".into()))?;
    let dim = first.mean.len();
    if dim == 0 {
        return Err(Error::InvalidSpec("cluster mean must have at least one coordinate".into()));
    }
    for (i, c) in specs.iter().enumerate() {
        if c.mean.len() != dim {
            return Err(Error::InvalidSpec(format!(
                "cluster {i} has dimension {} (expected {dim})",
                c.mean.len()
            )));
        }
        if !(c.stddev >= 0.0 && c.stddev.is_finite()) {
            return Err(Error::InvalidSpec(format!("cluster {i} stddev must be finite and >= 0")));
        }
        if c.count == 0 {
            return Err(Error::InvalidSpec(format!("cluster {i} count must be >= 1")));
        }
        if c.mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSpec(format!("cluster {i} mean must be finite")));
        }
    }
    let mut distinct: Vec<usize> = specs.iter().map(|c| c.label).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::InvalidSpec("clusters must cover at least 2 distinct labels".into()));
    }
    let classes = distinct.last().copied().unwrap_or(0) + 1;

    let total: usize = specs.iter().map(|c| c.count).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(total * dim);
    let mut labels = Vec::with_capacity(total);
    for c in specs {
        for _ in 0..c.count {
            for &m in &c.mean {
                let z: f64 = StandardNormal.sample(&mut rng);
                rows.push(m + c.stddev * z);
            }
            labels.push(c.label);
        }
    }
    Dataset::new(
        DMatrix::from_row_slice(total, dim, &rows),
        labels,
        classes,
        format!("clusters-seed{seed}"),
    )
}

/// How the forget set is selected.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitRule {
    WholeClass {
        class: usize,
    },
    /// The first `count` samples of `class` in dataset order.
    CountFromClass {
        class: usize,
        count: usize,
    },
    ExplicitIndices {
        indices: Vec<usize>,
    },
}

/// A dataset partitioned into a forget cohort and its complement.
#[derive(Debug, Clone, PartialEq)]
pub struct ForgetSplit {
    dataset: Dataset,
    forget: Vec<usize>,
    retain: Vec<usize>,
    rule: SplitRule,
}

pub fn make_split(ds: &Dataset, rule: SplitRule) -> Result<ForgetSplit> {
    let n = ds.len();
    let forget: Vec<usize> = match &rule {
        SplitRule::WholeClass { class } => {
            let idx: Vec<usize> = (0..n).filter(|&i| ds.labels[i] == *class).collect();
            if idx.is_empty() {
                return Err(Error::NoSuchClass(*class));
            }
            idx
        }
        SplitRule::CountFromClass { class, count } => {
            if *count == 0 {
                return Err(Error::EmptyForget);
            }
            if *count >= n {
                return Err(Error::EmptyRetain);
            }
            let available = ds.class_count(*class);
            if available == 0 {
                return Err(Error::NoSuchClass(*class));
            }
            if available < *count {
                return Err(Error::InvalidSpec(format!(
                    "class {class} has only {available} samples, {count} requested"
                )));
            }
            (0..n).filter(|&i| ds.labels[i] == *class).take(*count).collect()
        }
        SplitRule::ExplicitIndices { indices } => {
            let mut idx = indices.clone();
            idx.sort_unstable();
            idx.dedup();
            if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
                return Err(Error::InvalidSpec(format!("forget index {bad} out of range for {n} samples")));
            }
            idx
        }
    };
    if forget.is_empty() {
        return Err(Error::EmptyForget);
    }
    if forget.len() >= n {
        return Err(Error::EmptyRetain);
    }
    let mut mask = vec![false; n];
    for &i in &forget {
        mask[i] = true;
    }
    let retain = (0..n).filter(|&i| !mask[i]).collect();
    Ok(ForgetSplit {
        dataset: ds.clone(),
        forget,
        retain,
        rule,
    })
}

impl ForgetSplit {
    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn forget_indices(&self) -> &[usize] {
        &self.forget
    }

    pub fn retain_indices(&self) -> &[usize] {
        &self.retain
    }

    pub fn rule(&self) -> &SplitRule {
        &self.rule
    }

    pub fn is_forgotten(&self, i: usize) -> bool {
        self.forget.binary_search(&i).is_ok()
    }

    /// The class removed by a whole-class rule.
    pub fn whole_class(&self) -> Option<usize> {
        match self.rule {
            SplitRule::WholeClass { class } => Some(class),
            _ => None,
        }
    }

    pub fn partition(&self) -> Partition<'_> {
        Partition {
            data: &self.dataset,
            retain: Cow::Borrowed(&self.retain),
            forget: Cow::Borrowed(&self.forget),
        }
    }

    pub fn forget_set(&self) -> Result<Dataset> {
        self.dataset.subset(&self.forget, format!("{}-forget", self.dataset.name))
    }

    pub fn retain_set(&self) -> Result<Dataset> {
        self.dataset.subset(&self.retain, format!("{}-retain", self.dataset.name))
    }
}

/// A borrowed view of a dataset as retain/forget index sets. Unlike
/// [`ForgetSplit`] the forget side may be empty, which is how reference
/// scrubs that never see the cohort are expressed.
#[derive(Debug, Clone)]
pub struct Partition<'a> {
    pub data: &'a Dataset,
    pub retain: Cow<'a, [usize]>,
    pub forget: Cow<'a, [usize]>,
}

impl<'a> Partition<'a> {
    /// Every sample retained, nothing to forget.
    pub fn retain_all(data: &'a Dataset) -> Self {
        Partition {
            data,
            retain: Cow::Owned(data.all_indices()),
            forget: Cow::Owned(Vec::new()),
        }
    }

    /// Only the given indices, nothing to forget.
    pub fn retain_only(data: &'a Dataset, retain: &'a [usize]) -> Self {
        Partition {
            data,
            retain: Cow::Borrowed(retain),
            forget: Cow::Owned(Vec::new()),
        }
    }

    /// Retain and forget indices together, sorted.
    pub fn all(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.retain.iter().chain(self.forget.iter()).copied().collect();
        all.sort_unstable();
        all
    }
}

/// Writes `# d=<d> K=<K>` followed by `f1,...,fd,label` rows. Further
/// `#` lines are skipped on load.
pub fn save_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_csv_string(ds)).map_err(|e| Error::io(path, e))
}

pub fn to_csv_string(ds: &Dataset) -> String {
    let mut out = format!("# d={} K={}\n", ds.dim(), ds.classes);
    for i in 0..ds.len() {
        for j in 0..ds.dim() {
            // Display for f64 is the shortest representation that round-trips
            out.push_str(&format!("{},", ds.features[(i, j)]));
        }
        out.push_str(&format!("{}\n", ds.labels[i]));
    }
    out
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    parse_csv(&text, name)
}

pub fn parse_csv(text: &str, name: impl Into<String>) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "empty file".into(),
    })?;
    let (dim, classes) = parse_header(header)?;

    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (line, text) in lines {
        // comment lines after the header carry provenance
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = text.split(',').map(str::trim).collect();
        if fields.len() != dim + 1 {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", dim + 1, fields.len()),
            });
        }
        for f in &fields[..dim] {
            let v: f64 = f.parse().map_err(|_| Error::Parse {
                line,
                message: format!("invalid feature `{f}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("non-finite feature `{f}`"),
                });
            }
            rows.push(v);
        }
        let raw = fields[dim];
        let label: usize = raw.parse().map_err(|_| Error::Parse {
            line,
            message: format!("invalid label `{raw}`"),
        })?;
        if label >= classes {
            return Err(Error::LabelOutOfRange { line, label, classes });
        }
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::Parse {
            line: 1,
            message: "empty: no samples after header".into(),
        });
    }
    let n = labels.len();
    Dataset::new(DMatrix::from_row_slice(n, dim, &rows), labels, classes, name)
}

fn parse_header(header: &str) -> Result<(usize, usize)> {
    let bad = |message: String| Error::Parse { line: 1, message };
    let body = header
        .strip_prefix('#')
        .ok_or_else(|| bad("header must look like `# d=<d> K=<K>`".into()))?;
    let mut dim = None;
    let mut classes = None;
    for token in body.split_whitespace() {
        let (key, value) = token
            .split_once('=')
            .ok_or_else(|| bad(format!("malformed header token `{token}`")))?;
        let value: usize = value
            .parse()
            .map_err(|_| bad(format!("header value `{value}` is not an integer")))?;
        match key {
            "d" => dim = Some(value),
            "K" => classes = Some(value),
            other => return Err(bad(format!("unknown header key `{other}`"))),
        }
    }
    match (dim, classes) {
        (Some(d), Some(k)) if d >= 1 && k >= 1 => Ok((d, k)),
        _ => Err(bad("header needs positive d and K".into())),
    }
}
