//! Labelled datasets: CSV ingestion, [-1, 1] scaling, seeded splits, PCA and
//! synthetic Gaussian mixtures.

use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, matrix_serde};

/// Feature matrix (one row per point) with contiguous class ids.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: DMatrix<f64>,
    labels: Vec<usize>,
    class_count: usize,
    feature_names: Option<Vec<String>>,
    class_values: Vec<String>,
}

impl LabeledDataset {
    pub fn new(features: DMatrix<f64>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if features.nrows() == 0 || features.ncols() == 0 {
            return Err(Error::EmptyDataset);
        }
        if labels.len() != features.nrows() {
            return Err(Error::DimensionMismatch {
                expected: features.nrows(),
                found: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::InvalidParameter(format!(
                "label {bad} outside 0..{class_count}"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite feature value".into()));
        }
        let class_values = (0..class_count).map(|c| c.to_string()).collect();
        Ok(Self {
            features,
            labels,
            class_count,
            feature_names: None,
            class_values,
        })
    }

    /// Builds a dataset from row vectors.
    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let dim = rows[0].len();
        if let Some(r) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: r.len(),
            });
        }
        let features = DMatrix::from_fn(rows.len(), dim, |i, j| rows[i][j]);
        Self::new(features, labels, class_count)
    }

    pub fn with_feature_names(mut self, names: Vec<String>) -> Self {
        self.feature_names = Some(names);
        self
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn feature_names(&self) -> Option<&[String]> {
        self.feature_names.as_deref()
    }

    /// Original label value for each class id.
    pub fn class_values(&self) -> &[String] {
        &self.class_values
    }

    /// True when only one class exists; accepted but most supervised
    /// operations will refuse it.
    pub fn is_single_class(&self) -> bool {
        self.class_count == 1
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn point(&self, i: usize) -> DVector<f64> {
        self.features.row(i).transpose()
    }

    pub fn point_vec(&self, i: usize) -> Vec<f64> {
        self.features.row(i).iter().copied().collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Rows at `indices`, in the given order. Class ids are kept as-is.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let features = DMatrix::from_fn(indices.len(), self.dim(), |i, j| {
            self.features[(indices[i], j)]
        });
        Self {
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            feature_names: self.feature_names.clone(),
            class_values: self.class_values.clone(),
        }
    }

    /// Same labels, new feature matrix (e.g. after a linear transform).
    pub fn with_features(&self, features: DMatrix<f64>) -> Result<Self> {
        if features.nrows() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                found: features.nrows(),
            });
        }
        let mut out = Self::new(features, self.labels.clone(), self.class_count)?;
        out.class_values = self.class_values.clone();
        if out.dim() == self.dim() {
            out.feature_names = self.feature_names.clone();
        }
        Ok(out)
    }

    /// Same features, new labels.
    pub fn relabeled(&self, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let mut out = Self::new(self.features.clone(), labels, class_count)?;
        out.feature_names = self.feature_names.clone();
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelColumn {
    Index(usize),
    Name(String),
    /// The right-most column (`null` in JSON, `last` on the command line).
    Last,
}

impl std::str::FromStr for LabelColumn {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s.parse::<usize>() {
            Ok(i) => LabelColumn::Index(i),
            Err(_) if s == "last" => LabelColumn::Last,
            Err(_) => LabelColumn::Name(s.to_string()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvOptions {
    pub has_header: bool,
    pub label_column: LabelColumn,
}

impl Default for CsvOptions {
    fn default() -> Self {
        Self {
            has_header: true,
            label_column: LabelColumn::Last,
        }
    }
}

impl CsvOptions {
    pub fn new(has_header: bool, label_column: LabelColumn) -> Self {
        Self {
            has_header,
            label_column,
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, options: &CsvOptions) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_csv(file, options)
}

/// Parses a numeric CSV table. Labels are re-encoded to `0..C` in sorted order of their
/// original numeric values.
pub fn read_csv<R: Read>(reader: R, options: &CsvOptions) -> Result<LabeledDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(options.has_header)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Option<Vec<String>> = if options.has_header {
        Some(rdr.headers()?.iter().map(str::to_string).collect())
    } else {
        None
    };

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (row_idx, record) in rdr.records().enumerate() {
        let record = record?;
        let mut values = Vec::with_capacity(record.len());
        for (col, cell) in record.iter().enumerate() {
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => values.push(v),
                _ => return Err(Error::NonNumericCell { row: row_idx, col }),
            }
        }
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(Error::DimensionMismatch {
                    expected: w,
                    found: values.len(),
                })
            }
            _ => {}
        }
        rows.push(values);
    }
    let width = width.ok_or(Error::EmptyDataset)?;
    if width < 2 {
        return Err(Error::EmptyDataset);
    }

    let label_col = match &options.label_column {
        LabelColumn::Last => width - 1,
        LabelColumn::Index(i) if *i < width => *i,
        LabelColumn::Index(i) => return Err(Error::MissingLabelColumn(i.to_string())),
        LabelColumn::Name(name) => header
            .as_ref()
            .and_then(|h| h.iter().position(|c| c == name))
            .ok_or_else(|| Error::MissingLabelColumn(name.clone()))?,
    };

    let mut distinct: Vec<f64> = rows.iter().map(|r| r[label_col]).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let labels: Vec<usize> = rows
        .iter()
        .map(|r| {
            distinct
                .binary_search_by(|v| v.total_cmp(&r[label_col]))
                .expect("label value present")
        })
        .collect();

    let dim = width - 1;
    let features = DMatrix::from_fn(rows.len(), dim, |i, j| {
        let col = if j < label_col { j } else { j + 1 };
        rows[i][col]
    });
    let mut ds = LabeledDataset::new(features, labels, distinct.len())?;
    ds.class_values = distinct.iter().map(|v| v.to_string()).collect();
    if let Some(h) = header {
        let names = h
            .into_iter()
            .enumerate()
            .filter(|(i, _)| *i != label_col)
            .map(|(_, n)| n)
            .collect();
        ds.feature_names = Some(names);
    }
    if ds.is_single_class() {
        log::warn!("dataset has a single class");
    }
    Ok(ds)
}

/// Per-feature affine map to [-1, 1] estimated on one dataset and reused on others.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleParams {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl ScaleParams {
    pub fn fit(features: &DMatrix<f64>) -> Self {
        let cols = features.ncols();
        let mut min = vec![f64::INFINITY; cols];
        let mut max = vec![f64::NEG_INFINITY; cols];
        for j in 0..cols {
            for v in features.column(j).iter() {
                min[j] = min[j].min(*v);
                max[j] = max[j].max(*v);
            }
        }
        Self { min, max }
    }

    pub fn apply_matrix(&self, features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if features.ncols() != self.min.len() {
            return Err(Error::DimensionMismatch {
                expected: self.min.len(),
                found: features.ncols(),
            });
        }
        Ok(DMatrix::from_fn(features.nrows(), features.ncols(), |i, j| {
            let (lo, hi) = (self.min[j], self.max[j]);
            if hi > lo {
                2.0 * (features[(i, j)] - lo) / (hi - lo) - 1.0
            } else {
                0.0
            }
        }))
    }

    pub fn apply(&self, ds: &LabeledDataset) -> Result<LabeledDataset> {
        ds.with_features(self.apply_matrix(ds.features())?)
    }
}

/// Scales every feature so the observed minimum maps to -1 and the maximum to
/// +1. Constant features map to 0.
pub fn scale_features(ds: &LabeledDataset) -> Result<(LabeledDataset, ScaleParams)> {
    let params = ScaleParams::fit(ds.features());
    let scaled = params.apply(ds)?;
    Ok((scaled, params))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub ratios: [f64; 3],
    pub seed: u64,
    pub stratified: bool,
}

impl SplitSpec {
    pub fn new(ratios: [f64; 3], seed: u64, stratified: bool) -> Result<Self> {
        let spec = Self {
            ratios,
            seed,
            stratified,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The 60/20/20 protocol.
    pub fn standard(seed: u64) -> Self {
        Self {
            ratios: [0.6, 0.2, 0.2],
            seed,
            stratified: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratios.iter().any(|r| !(*r > 0.0 && *r < 1.0)) {
            return Err(Error::InvalidParameter(format!(
                "split ratios must lie in (0, 1): {:?}",
                self.ratios
            )));
        }
        let sum: f64 = self.ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "split ratios sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: LabeledDataset,
    pub validation: LabeledDataset,
    pub test: LabeledDataset,
    pub indices: SplitIndices,
}

/// Sizes for a group of `n` items; every portion gets at least one item.
fn portion_sizes(n: usize, ratios: &[f64; 3]) -> Option<(usize, usize, usize)> {
    if n < 3 {
        return None;
    }
    let mut train = ((ratios[0] * n as f64).round() as usize).max(1);
    let mut val = ((ratios[1] * n as f64).round() as usize).max(1);
    while train + val > n - 1 {
        if train >= val {
            train -= 1;
        } else {
            val -= 1;
        }
    }
    if train == 0 || val == 0 {
        return None;
    }
    Some((train, val, n - train - val))
}

pub fn split_indices(labels: &[usize], class_count: usize, spec: &SplitSpec) -> Result<SplitIndices> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let groups: Vec<Vec<usize>> = if spec.stratified {
        let mut g = vec![Vec::new(); class_count];
        for (i, &l) in labels.iter().enumerate() {
            g[l].push(i);
        }
        g.retain(|members| !members.is_empty());
        g
    } else {
        vec![(0..labels.len()).collect()]
    };

    let mut out = SplitIndices {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for (g, mut members) in groups.into_iter().enumerate() {
        let (nt, nv, _) = portion_sizes(members.len(), &spec.ratios).ok_or_else(|| {
            Error::InfeasibleSplit(if spec.stratified {
                format!("class group {g} has {} members, need at least 3", members.len())
            } else {
                format!("{} points cannot fill three portions", members.len())
            })
        })?;
        members.shuffle(&mut rng);
        out.train.extend_from_slice(&members[..nt]);
        out.validation.extend_from_slice(&members[nt..nt + nv]);
        out.test.extend_from_slice(&members[nt + nv..]);
    }
    out.train.sort_unstable();
    out.validation.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

/// Seeded train/validation/test partition.
pub fn split(ds: &LabeledDataset, spec: &SplitSpec) -> Result<Split> {
    let indices = split_indices(ds.labels(), ds.class_count(), spec)?;
    Ok(Split {
        train: ds.subset(&indices.train),
        validation: ds.subset(&indices.validation),
        test: ds.subset(&indices.test),
        indices,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionParams {
    pub mean: Vec<f64>,
    /// D x d matrix whose columns are the principal directions.
    #[serde(with = "matrix_serde")]
    pub components: DMatrix<f64>,
    /// All covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// Variance fraction carried by each retained component.
    pub explained_variance_ratio: Vec<f64>,
}

impl ProjectionParams {
    pub fn captured_variance(&self) -> f64 {
        self.explained_variance_ratio.iter().sum()
    }

    pub fn project_matrix(&self, features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if features.ncols() != self.mean.len() {
            return Err(Error::DimensionMismatch {
                expected: self.mean.len(),
                found: features.ncols(),
            });
        }
        let mut centered = features.clone();
        for (j, m) in self.mean.iter().enumerate() {
            centered.column_mut(j).add_scalar_mut(-m);
        }
        Ok(centered * &self.components)
    }

    pub fn project(&self, ds: &LabeledDataset) -> Result<LabeledDataset> {
        ds.with_features(self.project_matrix(ds.features())?)
    }
}

/// Projects onto the top-`d` eigenvectors of the centred training covariance.
pub fn pca_reduce(train: &LabeledDataset, d: usize) -> Result<(ProjectionParams, LabeledDataset)> {
    let dim = train.dim();
    if d == 0 || d > dim {
        return Err(Error::InvalidParameter(format!(
            "PCA target dimension {d} must lie in 1..={dim}"
        )));
    }
    let x = train.features();
    let n = x.nrows() as f64;
    let mean: Vec<f64> = (0..dim).map(|j| x.column(j).sum() / n).collect();
    let mut centered = x.clone();
    for (j, m) in mean.iter().enumerate() {
        centered.column_mut(j).add_scalar_mut(-m);
    }
    let cov = linalg::symmetrize(&(centered.transpose() * &centered / n));
    let (values, mut vectors) = linalg::sym_eigen_desc(&cov);
    for j in 0..dim {
        let col = vectors.column(j);
        let pivot = col.iter().copied().fold(0.0_f64, |a, v| if v.abs() > a.abs() { v } else { a });
        if pivot < 0.0 {
            vectors.column_mut(j).neg_mut();
        }
    }
    let trace: f64 = values.iter().map(|v| v.max(0.0)).sum();
    let explained = values[..d]
        .iter()
        .map(|v| if trace > 0.0 { v.max(0.0) / trace } else { 0.0 })
        .collect();
    let params = ProjectionParams {
        mean,
        components: vectors.columns(0, d).into_owned(),
        eigenvalues: values,
        explained_variance_ratio: explained,
    };
    let reduced = params.project(train)?;
    Ok((params, reduced))
}

/// Preprocessing fitted on the training portion and applied to all three.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Preprocess {
    /// Map every feature to [-1, 1] using training minima and maxima.
    #[serde(default)]
    pub scale: bool,
    /// Project onto this many principal components after scaling.
    #[serde(default)]
    pub pca_dim: Option<usize>,
}

/// Splits `ds` and applies `pre` with parameters estimated on the training
/// portion only.
pub fn prepare_split(ds: &LabeledDataset, spec: &SplitSpec, pre: &Preprocess) -> Result<Split> {
    let mut s = split(ds, spec)?;
    if pre.scale {
        let params = ScaleParams::fit(s.train.features());
        s.train = params.apply(&s.train)?;
        s.validation = params.apply(&s.validation)?;
        s.test = params.apply(&s.test)?;
    }
    if let Some(d) = pre.pca_dim {
        let (params, train) = pca_reduce(&s.train, d)?;
        s.train = train;
        s.validation = params.project(&s.validation)?;
        s.test = params.project(&s.test)?;
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    #[serde(with = "matrix_serde")]
    pub covariance: DMatrix<f64>,
    pub class: usize,
}

/// Draws `n` labelled points: a component is picked by weight, then a point
/// from its Gaussian.
pub fn make_synthetic_mixture(
    components: &[MixtureComponent],
    n: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    let first = components.first().ok_or(Error::EmptyInput("mixture components"))?;
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let dim = first.mean.len();
    let total: f64 = components.iter().map(|c| c.weight).sum();
    if components.iter().any(|c| !(c.weight >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter(
            "mixture weights must be non-negative and sum to 1".into(),
        ));
    }
    let mut factors = Vec::with_capacity(components.len());
    for (i, c) in components.iter().enumerate() {
        if c.mean.len() != dim || c.covariance.shape() != (dim, dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: c.mean.len(),
            });
        }
        if linalg::max_asymmetry(&c.covariance) > 1e-12 * linalg::max_abs(&c.covariance).max(1.0) {
            return Err(Error::NotPositiveDefinite(format!("component {i} covariance is not symmetric")));
        }
        let chol = c
            .covariance
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite(format!("component {i} covariance")))?;
        factors.push(chol.l());
    }
    let class_count = components.iter().map(|c| c.class).max().unwrap_or(0) + 1;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = DMatrix::zeros(n, dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let u: f64 = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = components.len() - 1;
        for (k, c) in components.iter().enumerate() {
            acc += c.weight;
            if c.weight > 0.0 && u < acc {
                pick = k;
                break;
            }
        }
        while components[pick].weight == 0.0 {
            pick -= 1;
        }
        let z = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = DVector::from_column_slice(&components[pick].mean) + &factors[pick] * z;
        features.set_row(i, &x.transpose());
        labels.push(components[pick].class);
    }
    LabeledDataset::new(features, labels, class_count)
}

/// Default number of points drawn for the three-Gaussian preset.
pub const THREE_NORMAL_SIZE: usize = 1238;

/// Three equally weighted classes in 10 dimensions. Before a fixed rotation,
/// class `c` has mean `3·e_c`, unit variance in the first three coordinates
/// and standard deviation 2.5 in the remaining seven.
pub fn three_normal_preset() -> Vec<MixtureComponent> {
    let dim = 10;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let g = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let rotation = g.qr().q();
    let scales = DVector::from_fn(dim, |j, _| if j < 3 { 1.0 } else { 6.25 });
    let cov = linalg::symmetrize(&(&rotation * DMatrix::from_diagonal(&scales) * rotation.transpose()));
    (0..3)
        .map(|c| {
            let mut mean = DVector::zeros(dim);
            mean[c] = 3.0;
            MixtureComponent {
                weight: 1.0 / 3.0,
                mean: (&rotation * mean).as_slice().to_vec(),
                covariance: cov.clone(),
                class: c,
            }
        })
        .collect()
}
