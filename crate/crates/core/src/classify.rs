//! Metric kNN and energy-based classification, margin heuristics, and
//! validation-tuned evaluation.

use std::cmp::Ordering;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::generative::GenerativeModelSet;
use crate::global_metric::metric_sqrt_transform;
use crate::linalg::{self, Rows};
use crate::local_metric::{interpolate_with_euclidean, local_metric_at, MetricMatrix};
use crate::par;

/// Default neighbour counts searched during tuning.
pub const DEFAULT_K_GRID: [usize; 6] = [1, 3, 5, 7, 9, 11];
/// Default Euclidean interpolation weights for per-query local metrics.
pub const DEFAULT_LAMBDA_GRID: [f64; 11] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
/// Default margin multipliers for the energy rule.
pub const DEFAULT_BETA_GRID: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

/// Squared Mahalanobis distance `(x − x')ᵀM(x − x')`.
pub fn mahalanobis_distance(metric: &MetricMatrix, x: &[f64], y: &[f64]) -> f64 {
    quad_form(metric.matrix(), x, y)
}

fn quad_form(m: &DMatrix<f64>, x: &[f64], y: &[f64]) -> f64 {
    let d = x.len();
    let diff: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let mut total = 0.0;
    for i in 0..d {
        let mut row = 0.0;
        for j in 0..d {
            row += m[(i, j)] * diff[j];
        }
        total += diff[i] * row;
    }
    total.max(0.0)
}

fn by_distance(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// The `k` smallest `(distance, index)` pairs in ascending order; equal
/// distances are ordered by index.
pub(crate) fn k_smallest(mut dists: Vec<(f64, usize)>, k: usize) -> Vec<(f64, usize)> {
    let k = k.min(dists.len());
    if k == 0 {
        return Vec::new();
    }
    if k < dists.len() {
        dists.select_nth_unstable_by(k - 1, by_distance);
        dists.truncate(k);
    }
    dists.sort_by(by_distance);
    dists
}

fn euclidean_neighbors(rows: &Rows, x: &[f64], k: usize) -> Vec<(f64, usize)> {
    let dists = (0..rows.len()).map(|i| (linalg::sq_dist(rows.row(i), x), i)).collect();
    k_smallest(dists, k)
}

/// How equal vote counts are resolved.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieRule {
    /// Smaller summed distance of the tied classes' voters, then lower class.
    #[default]
    DistanceSumThenLowerClass,
}

/// Majority vote over sorted neighbours.
pub(crate) fn vote(neighbors: &[(f64, usize)], labels: &[usize], class_count: usize) -> usize {
    let mut counts = vec![0usize; class_count];
    let mut sums = vec![0.0; class_count];
    for &(d, i) in neighbors {
        counts[labels[i]] += 1;
        sums[labels[i]] += d;
    }
    let mut best = 0;
    for c in 1..class_count {
        if counts[c] > counts[best] || (counts[c] == counts[best] && counts[c] > 0 && sums[c] < sums[best]) {
            best = c;
        }
    }
    best
}

/// Euclidean k-NN label of `x` among `rows`.
pub fn knn_vote(rows: &Rows, labels: &[usize], class_count: usize, k: usize, x: &[f64]) -> usize {
    vote(&euclidean_neighbors(rows, x, k), labels, class_count)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KnnConfig {
    pub k: usize,
    pub metric: MetricMatrix,
    #[serde(default)]
    pub tie_rule: TieRule,
}

pub trait Predictor: Sync {
    fn predict(&self, x: &[f64]) -> usize;

    fn predict_batch(&self, x: &DMatrix<f64>) -> Vec<usize> {
        par::map_range(x.nrows(), |i| {
            let row: Vec<f64> = x.row(i).iter().copied().collect();
            self.predict(&row)
        })
    }
}

/// k-NN under a fixed metric, searched in the coordinates `Lx`.
#[derive(Debug, Clone)]
pub struct KnnClassifier {
    rows: Rows,
    labels: Vec<usize>,
    class_count: usize,
    l: DMatrix<f64>,
    k: usize,
}

impl KnnClassifier {
    pub fn new(train: &LabeledDataset, config: &KnnConfig) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if config.k == 0 || config.k > train.len() {
            return Err(Error::InvalidParameter(format!(
                "k = {} must lie in 1..={}",
                config.k,
                train.len()
            )));
        }
        if config.metric.dim() != train.dim() {
            return Err(Error::DimensionMismatch {
                expected: train.dim(),
                found: config.metric.dim(),
            });
        }
        let l = metric_sqrt_transform(&config.metric)?.l;
        Ok(Self {
            rows: Rows::transformed(train.features(), &l),
            labels: train.labels().to_vec(),
            class_count: train.class_count(),
            l,
            k: config.k,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// `k` nearest training points of `x` as `(squared distance, index)`.
    pub fn neighbors(&self, x: &[f64], k: usize) -> Vec<(f64, usize)> {
        euclidean_neighbors(&self.rows, &linalg::apply(&self.l, x), k)
    }

    pub fn vote_with(&self, neighbors: &[(f64, usize)]) -> usize {
        vote(neighbors, &self.labels, self.class_count)
    }
}

impl Predictor for KnnClassifier {
    fn predict(&self, x: &[f64]) -> usize {
        self.vote_with(&self.neighbors(x, self.k))
    }
}

/// Majority vote among the `k` nearest training points under the metric.
pub fn knn_predict(train: &LabeledDataset, config: &KnnConfig, x: &[f64]) -> Result<usize> {
    Ok(KnnClassifier::new(train, config)?.predict(x))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnergyConfig {
    pub k: usize,
    pub margin: f64,
    pub metric: MetricMatrix,
}

/// Energy rule: for each class `c`,
/// `E_c = Σ_{j∈N_c} d_j + Σ_{j∈N_c} Σ_{l∈N_¬c} max(0, margin + d_j − d_l)`
/// with `N_c` the `k` nearest points of class `c` and `N_¬c` the `k` nearest
/// of the other classes. Predicts the lowest energy, lower class on ties.
#[derive(Debug, Clone)]
pub struct EnergyClassifier {
    rows: Rows,
    labels: Vec<usize>,
    class_count: usize,
    l: DMatrix<f64>,
    k: usize,
    margin: f64,
}

impl EnergyClassifier {
    pub fn new(train: &LabeledDataset, config: &EnergyConfig) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if !(config.margin >= 0.0) {
            return Err(Error::InvalidParameter("margin must be non-negative".into()));
        }
        if config.metric.dim() != train.dim() {
            return Err(Error::DimensionMismatch {
                expected: train.dim(),
                found: config.metric.dim(),
            });
        }
        let counts = train.class_counts();
        if config.k == 0 {
            return Err(Error::InvalidParameter("k must be positive".into()));
        }
        if let Some(c) = counts.iter().position(|&n| n < config.k) {
            return Err(Error::InvalidParameter(format!(
                "class {c} has {} members, fewer than k = {}",
                counts[c], config.k
            )));
        }
        let l = metric_sqrt_transform(&config.metric)?.l;
        Ok(Self {
            rows: Rows::transformed(train.features(), &l),
            labels: train.labels().to_vec(),
            class_count: train.class_count(),
            l,
            k: config.k,
            margin: config.margin,
        })
    }

    /// Energies of every class at `x`.
    pub fn energies(&self, x: &[f64]) -> Vec<f64> {
        let z = linalg::apply(&self.l, x);
        let mut all: Vec<(f64, usize)> = (0..self.rows.len())
            .map(|i| (linalg::sq_dist(self.rows.row(i), &z), i))
            .collect();
        all.sort_by(by_distance);
        (0..self.class_count)
            .map(|c| {
                let own: Vec<f64> = all
                    .iter()
                    .filter(|(_, i)| self.labels[*i] == c)
                    .take(self.k)
                    .map(|p| p.0)
                    .collect();
                let other: Vec<f64> = all
                    .iter()
                    .filter(|(_, i)| self.labels[*i] != c)
                    .take(self.k)
                    .map(|p| p.0)
                    .collect();
                let mut e: f64 = own.iter().sum();
                for dj in &own {
                    for dl in &other {
                        e += (self.margin + dj - dl).max(0.0);
                    }
                }
                e
            })
            .collect()
    }
}

impl Predictor for EnergyClassifier {
    fn predict(&self, x: &[f64]) -> usize {
        let e = self.energies(x);
        let mut best = 0;
        for c in 1..e.len() {
            if e[c] < e[best] {
                best = c;
            }
        }
        best
    }
}

pub fn energy_predict(train: &LabeledDataset, config: &EnergyConfig, x: &[f64]) -> Result<usize> {
    Ok(EnergyClassifier::new(train, config)?.predict(x))
}

/// Median over training points of (squared distance to the nearest
/// other-class point − squared distance to the nearest same-class point).
pub fn margin_gamma0(train: &LabeledDataset, metric: &MetricMatrix) -> Result<f64> {
    if train.class_counts().iter().filter(|&&n| n > 0).count() < 2 {
        return Err(Error::InvalidParameter("margins need at least two classes".into()));
    }
    if let Some(c) = train.class_counts().iter().position(|&n| n == 1) {
        return Err(Error::InvalidParameter(format!(
            "class {c} has a single member, so it has no same-class neighbour"
        )));
    }
    let l = metric_sqrt_transform(metric)?.l;
    let rows = Rows::transformed(train.features(), &l);
    let labels = train.labels();
    let mut gaps = par::map_range(rows.len(), |i| {
        let mut same = f64::INFINITY;
        let mut other = f64::INFINITY;
        for j in 0..rows.len() {
            if j == i {
                continue;
            }
            let d = linalg::sq_dist(rows.row(i), rows.row(j));
            if labels[j] == labels[i] {
                same = same.min(d);
            } else {
                other = other.min(d);
            }
        }
        other - same
    });
    Ok(linalg::median(&mut gaps).expect("non-empty"))
}

/// `{max(0, β·γ₀)}` for every β in the grid.
pub fn margin_candidates(train: &LabeledDataset, metric: &MetricMatrix, beta_grid: &[f64]) -> Result<Vec<f64>> {
    let gamma0 = margin_gamma0(train, metric)?;
    Ok(beta_grid.iter().map(|b| (b * gamma0).max(0.0)).collect())
}

/// Fraction of misclassified test points.
pub fn evaluate_error<P: Predictor + ?Sized>(predictor: &P, test: &LabeledDataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyInput("test set"));
    }
    let predicted = predictor.predict_batch(test.features());
    Ok(error_rate(&predicted, test.labels()))
}

pub(crate) fn error_rate(predicted: &[usize], truth: &[usize]) -> f64 {
    let wrong = predicted.iter().zip(truth).filter(|(a, b)| a != b).count();
    wrong as f64 / truth.len() as f64
}

/// Classification method with its hyperparameter grids.
#[derive(Debug, Clone)]
pub enum MethodSpec {
    /// k-NN under one fixed metric.
    Knn { metric: MetricMatrix, k_grid: Vec<usize> },
    /// k-NN where each query uses its own local metric blended with the
    /// identity.
    GlmInt {
        models: GenerativeModelSet,
        k_grid: Vec<usize>,
        lambda_grid: Vec<f64>,
        eps_rel: f64,
    },
    /// Energy rule with margins `β·γ₀`.
    Energy {
        metric: MetricMatrix,
        k_grid: Vec<usize>,
        beta_grid: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub k: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub margin: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub params: Hyperparams,
    pub validation_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunedResult {
    pub selected: Hyperparams,
    pub validation_error: f64,
    pub test_error: f64,
    pub grid: Vec<GridEntry>,
}

fn sorted_grid<T: Copy + PartialOrd>(grid: &[T], name: &str) -> Result<Vec<T>> {
    if grid.is_empty() {
        return Err(Error::InvalidParameter(format!("{name} grid is empty")));
    }
    let mut g = grid.to_vec();
    g.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    g.dedup_by(|a, b| a == b);
    Ok(g)
}

fn pick_best(grid: &[GridEntry]) -> Result<&GridEntry> {
    let mut best: Option<&GridEntry> = None;
    for e in grid {
        if best.is_none_or(|b| e.validation_error < b.validation_error) {
            best = Some(e);
        }
    }
    best.ok_or_else(|| Error::InvalidParameter("no admissible grid point".into()))
}

/// Grid search on `validation`, then the test error of the winner. Grid
/// entries are visited with `k` ascending, then `λ`/`β` ascending, and only
/// strictly better validation errors replace the incumbent.
pub fn tune_and_test(
    method: &MethodSpec,
    train: &LabeledDataset,
    validation: &LabeledDataset,
    test: &LabeledDataset,
) -> Result<TunedResult> {
    if validation.is_empty() || test.is_empty() {
        return Err(Error::EmptyInput("validation or test set"));
    }
    match method {
        MethodSpec::Knn { metric, k_grid } => {
            let ks: Vec<usize> = sorted_grid(k_grid, "k")?
                .into_iter()
                .filter(|&k| k >= 1 && k <= train.len())
                .collect();
            let k_max = *ks.last().ok_or(Error::InvalidParameter("no usable k".into()))?;
            let clf = KnnClassifier::new(train, &KnnConfig { k: k_max, metric: metric.clone(), tie_rule: TieRule::default() })?;
            let errors_for = |ds: &LabeledDataset, ks: &[usize]| -> Vec<f64> {
                let neigh = par::map_range(ds.len(), |i| clf.neighbors(&ds.point_vec(i), k_max));
                ks.iter()
                    .map(|&k| {
                        let pred: Vec<usize> = neigh.iter().map(|n| clf.vote_with(&n[..k])).collect();
                        error_rate(&pred, ds.labels())
                    })
                    .collect()
            };
            let val = errors_for(validation, &ks);
            let grid: Vec<GridEntry> = ks
                .iter()
                .zip(&val)
                .map(|(&k, &e)| GridEntry {
                    params: Hyperparams { k, lambda: None, beta: None, margin: None },
                    validation_error: e,
                })
                .collect();
            let best = pick_best(&grid)?.clone();
            let test_error = errors_for(test, &[best.params.k])[0];
            Ok(TunedResult {
                selected: best.params,
                validation_error: best.validation_error,
                test_error,
                grid,
            })
        }
        MethodSpec::GlmInt { models, k_grid, lambda_grid, eps_rel } => {
            let ks: Vec<usize> = sorted_grid(k_grid, "k")?
                .into_iter()
                .filter(|&k| k >= 1 && k <= train.len())
                .collect();
            let lambdas = sorted_grid(lambda_grid, "lambda")?;
            let k_max = *ks.last().ok_or(Error::InvalidParameter("no usable k".into()))?;
            let train_rows = Rows::from_matrix(train.features());
            // errors[λ][k]
            let errors_for = |ds: &LabeledDataset, ks: &[usize], lambdas: &[f64]| -> Result<Vec<Vec<f64>>> {
                let preds = par::map_range(ds.len(), |i| -> Result<Vec<Vec<usize>>> {
                    let x = ds.point_vec(i);
                    let local = local_metric_at(&x, models, *eps_rel)?;
                    lambdas
                        .iter()
                        .map(|&lam| {
                            let m = interpolate_with_euclidean(&local, lam)?;
                            let dists = (0..train_rows.len())
                                .map(|j| (quad_form(m.matrix(), &x, train_rows.row(j)), j))
                                .collect();
                            let n = k_smallest(dists, k_max);
                            Ok(ks.iter().map(|&k| vote(&n[..k], train.labels(), train.class_count())).collect())
                        })
                        .collect()
                })
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
                Ok((0..lambdas.len())
                    .map(|li| {
                        (0..ks.len())
                            .map(|ki| {
                                let p: Vec<usize> = preds.iter().map(|p| p[li][ki]).collect();
                                error_rate(&p, ds.labels())
                            })
                            .collect()
                    })
                    .collect())
            };
            let val = errors_for(validation, &ks, &lambdas)?;
            let mut grid = Vec::new();
            for (ki, &k) in ks.iter().enumerate() {
                for (li, &lam) in lambdas.iter().enumerate() {
                    grid.push(GridEntry {
                        params: Hyperparams { k, lambda: Some(lam), beta: None, margin: None },
                        validation_error: val[li][ki],
                    });
                }
            }
            let best = pick_best(&grid)?.clone();
            let test_error = errors_for(test, &[best.params.k], &[best.params.lambda.expect("set")])?[0][0];
            Ok(TunedResult {
                selected: best.params,
                validation_error: best.validation_error,
                test_error,
                grid,
            })
        }
        MethodSpec::Energy { metric, k_grid, beta_grid } => {
            let min_class = train.class_counts().into_iter().min().unwrap_or(0);
            let ks: Vec<usize> = sorted_grid(k_grid, "k")?
                .into_iter()
                .filter(|&k| k >= 1 && k <= min_class)
                .collect();
            let betas = sorted_grid(beta_grid, "beta")?;
            let gamma0 = margin_gamma0(train, metric)?;
            let mut grid = Vec::new();
            for &k in &ks {
                for &beta in &betas {
                    let margin = (beta * gamma0).max(0.0);
                    let clf = EnergyClassifier::new(train, &EnergyConfig { k, margin, metric: metric.clone() })?;
                    grid.push(GridEntry {
                        params: Hyperparams { k, lambda: None, beta: Some(beta), margin: Some(margin) },
                        validation_error: evaluate_error(&clf, validation)?,
                    });
                }
            }
            let best = pick_best(&grid)?.clone();
            let clf = EnergyClassifier::new(
                train,
                &EnergyConfig { k: best.params.k, margin: best.params.margin.expect("set"), metric: metric.clone() },
            )?;
            Ok(TunedResult {
                selected: best.params,
                validation_error: best.validation_error,
                test_error: evaluate_error(&clf, test)?,
                grid,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::local_metric::Provenance;
    use nalgebra::DVector;

    fn metric(v: &[f64]) -> MetricMatrix {
        MetricMatrix::new(DMatrix::from_diagonal(&DVector::from_column_slice(v)), Provenance::Euclidean).unwrap()
    }

    #[test]
    fn distance_examples() {
        assert_eq!(mahalanobis_distance(&metric(&[1.0, 1.0]), &[3.0, 4.0], &[0.0, 0.0]), 25.0);
        assert_eq!(mahalanobis_distance(&metric(&[2.0, 1.0]), &[1.0, 1.0], &[0.0, 0.0]), 3.0);
    }

    #[test]
    fn knn_majority_and_exact_hit() {
        let ds = LabeledDataset::from_rows(&[vec![0.0], vec![0.1], vec![0.3], vec![5.0]], vec![0, 0, 1, 1], 2).unwrap();
        let cfg = |k| KnnConfig { k, metric: MetricMatrix::identity(1), tie_rule: TieRule::default() };
        assert_eq!(knn_predict(&ds, &cfg(1), &[5.0]).unwrap(), 1);
        assert_eq!(knn_predict(&ds, &cfg(3), &[0.2]).unwrap(), 0);
        assert!(knn_predict(&ds, &cfg(5), &[0.2]).is_err());
    }

    #[test]
    fn vote_ties_use_distance_then_class() {
        let labels = [0, 1, 0, 1];
        assert_eq!(vote(&[(1.0, 1), (2.0, 0)], &labels, 2), 1);
        assert_eq!(vote(&[(1.0, 0), (1.0, 1)], &labels, 2), 0);
    }

    #[test]
    fn energy_examples() {
        let ds = LabeledDataset::from_rows(&[vec![-1.0], vec![1.0], vec![-3.0], vec![3.0]], vec![0, 1, 0, 1], 2).unwrap();
        let cfg = EnergyConfig { k: 1, margin: 0.0, metric: MetricMatrix::identity(1) };
        assert_eq!(energy_predict(&ds, &cfg, &[10.0]).unwrap(), 1);
        // mirror symmetric about 0
        assert_eq!(energy_predict(&ds, &cfg, &[0.0]).unwrap(), 0);
        let too_big = EnergyConfig { k: 3, ..cfg };
        assert!(energy_predict(&ds, &too_big, &[0.0]).is_err());
    }

    #[test]
    fn margins_from_constant_gaps() {
        // same-class partner at distance 1, other class at distance √3
        let s = 3f64.sqrt();
        let ds = LabeledDataset::from_rows(
            &[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 100.0 + s], vec![1.0, 100.0 + s]],
            vec![0, 0, 1, 1],
            2,
        )
        .unwrap();
        let g = margin_gamma0(&ds, &MetricMatrix::identity(2)).unwrap();
        assert!(g > 0.0);
        let c = margin_candidates(&ds, &MetricMatrix::identity(2), &[1.0, -1.0]).unwrap();
        assert_eq!(c, vec![g, 0.0]);
    }

    #[test]
    fn single_point_grid_matches_direct_evaluation() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, (i % 3) as f64]).collect();
        let labels: Vec<usize> = (0..20).map(|i| usize::from(i >= 10)).collect();
        let ds = LabeledDataset::from_rows(&rows, labels, 2).unwrap();
        let m = MetricMatrix::identity(2);
        let r = tune_and_test(&MethodSpec::Knn { metric: m.clone(), k_grid: vec![3] }, &ds, &ds, &ds).unwrap();
        let clf = KnnClassifier::new(&ds, &KnnConfig { k: 3, metric: m, tie_rule: TieRule::default() }).unwrap();
        assert_eq!(r.test_error, evaluate_error(&clf, &ds).unwrap());
        assert_eq!(r.grid.len(), 1);
    }
}
