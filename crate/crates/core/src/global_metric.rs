//! Global metrics built from local ones: the uniform average, the iterative
//! density-weighted combination, and the covariance check on the uniform
//! average.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::classify::knn_vote;
use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::generative::{
    fit_gaussian_models, GaussianModel, GenerativeModelSet, fit_gaussian_models_lenient, log_sum_exp, phi_matrix};
use crate::linalg::{self, matrix_serde, Rows};
use crate::local_metric::{
    compute_all_local_metrics, mean_matrix, solve_local_metric, MetricMatrix, Provenance,
};
use crate::par;

/// Iterations of the density-weighted combination when none is given.
pub const DEFAULT_MAX_ITER: usize = 20;

/// Pair budget for median-distance heuristics.
pub const MAX_MEDIAN_PAIRS: usize = 1_000_000;

/// Mean of the local metrics.
pub fn uniform_combination(locals: &[MetricMatrix]) -> Result<MetricMatrix> {
    let first = locals.first().ok_or(Error::EmptyInput("local metrics"))?;
    if let Some(bad) = locals.iter().find(|m| m.dim() != first.dim()) {
        return Err(Error::DimensionMismatch {
            expected: first.dim(),
            found: bad.dim(),
        });
    }
    let matrix = mean_matrix(locals).expect("non-empty");
    Ok(MetricMatrix::from_parts(
        matrix,
        Provenance::Global {
            method: "UNI".into(),
        },
        false,
        false,
    ))
}

/// Symmetric square root `L` of a metric, so that `LᵀL = M`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformFactor {
    #[serde(with = "matrix_serde")]
    pub l: DMatrix<f64>,
    pub source_metric: MetricMatrix,
}

impl TransformFactor {
    /// Rows of `x` mapped through `L`.
    pub fn transform_rows(&self, x: &DMatrix<f64>) -> Rows {
        Rows::transformed(x, &self.l)
    }

    pub fn transform_matrix(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        x * self.l.transpose()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        linalg::apply(&self.l, x)
    }
}

pub fn metric_sqrt_transform(metric: &MetricMatrix) -> Result<TransformFactor> {
    Ok(TransformFactor {
        l: linalg::sqrt_psd(metric.matrix(), 1e-10)?,
        source_metric: metric.clone(),
    })
}

fn kde_log_norm(n: usize, dim: usize, sigma: f64) -> f64 {
    (n as f64).ln() + 0.5 * dim as f64 * std::f64::consts::PI.ln() + dim as f64 * sigma.ln()
}

/// `1/h Σᵢ exp(−‖x − xᵢ‖²/σ²)` with `h = n·π^{D/2}·σ^D`.
pub fn kde_density(x_train: &DMatrix<f64>, sigma: f64, x: &[f64]) -> f64 {
    kde_log_density(&Rows::from_matrix(x_train), sigma, x).exp()
}

/// Natural log of [`kde_density`], evaluated stably.
pub fn kde_log_density(train: &Rows, sigma: f64, x: &[f64]) -> f64 {
    let s2 = sigma * sigma;
    let terms: Vec<f64> = (0..train.len())
        .map(|i| -linalg::sq_dist(train.row(i), x) / s2)
        .collect();
    log_sum_exp(&terms) - kde_log_norm(train.len(), train.dim(), sigma)
}

/// Bandwidth maximising the held-out log-likelihood over
/// `2^k · median pairwise distance`, `k = −3..3`. Without held-out points the
/// leave-one-out likelihood on `train` is used.
pub fn select_kde_bandwidth(train: &Rows, heldout: Option<&Rows>, seed: u64) -> Result<f64> {
    let median = linalg::median_pairwise_sq_dist(train, MAX_MEDIAN_PAIRS, seed)
        .ok_or(Error::EmptyInput("kde training points"))?
        .sqrt();
    if !(median > 0.0) {
        return Err(Error::DegeneratePairwiseDistances);
    }
    let mut best = (f64::NEG_INFINITY, median);
    for k in -3..=3 {
        let sigma = median * 2f64.powi(k);
        let score = match heldout {
            Some(v) => (0..v.len()).map(|i| kde_log_density(train, sigma, v.row(i))).sum(),
            None => leave_one_out_log_likelihood(train, sigma),
        };
        if score > best.0 {
            best = (score, sigma);
        }
    }
    Ok(best.1)
}

fn leave_one_out_log_likelihood(train: &Rows, sigma: f64) -> f64 {
    let n = train.len();
    let s2 = sigma * sigma;
    let norm = kde_log_norm(n - 1, train.dim(), sigma);
    (0..n)
        .map(|i| {
            let terms: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| -linalg::sq_dist(train.row(i), train.row(j)) / s2)
                .collect();
            log_sum_exp(&terms) - norm
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EstimatorKind {
    /// Kernel density estimate; bandwidth tuned per iteration unless fixed.
    Kde { bandwidth: Option<f64> },
    /// Per-class Gaussians refit after re-labelling the training points by
    /// k-NN against the validation set.
    Gmm { reclassify_k: usize },
    /// Equal weights.
    Uniform,
    /// Caller-supplied weights, normalised to sum one.
    Fixed { weights: Vec<f64> },
}

impl EstimatorKind {
    pub fn kde() -> Self {
        Self::Kde { bandwidth: None }
    }

    pub fn gmm() -> Self {
        Self::Gmm { reclassify_k: 3 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DensityWeightedConfig {
    pub estimator: EstimatorKind,
    pub max_iter: usize,
    /// Recompute local metrics from Gaussians refit in the transformed
    /// coordinates instead of transporting them.
    pub ms_refit: bool,
    pub lambda_cov: f64,
    pub eps_rel: f64,
    pub seed: u64,
}

impl DensityWeightedConfig {
    pub fn new(estimator: EstimatorKind) -> Self {
        Self {
            estimator,
            max_iter: DEFAULT_MAX_ITER,
            ms_refit: false,
            lambda_cov: crate::generative::DEFAULT_LAMBDA_COV,
            eps_rel: crate::local_metric::DEFAULT_EPS_REL,
            seed: 0,
        }
    }
}

/// Fitted density estimator of one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DensityEstimator {
    Kde { sigma: f64 },
    Gmm { classes: Vec<usize> },
    Uniform,
    Fixed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DensityWeightedResult {
    /// Composed metric in the original coordinates.
    pub metric: MetricMatrix,
    pub config: DensityWeightedConfig,
    /// Normalised weights of every iteration.
    pub weights: Vec<Vec<f64>>,
    pub estimators: Vec<DensityEstimator>,
    /// `‖w_t − w_{t−1}‖₁`, starting at the second iteration.
    pub weight_changes: Vec<f64>,
    /// Per-iteration factors `L_t`, applied in order.
    #[serde(skip)]
    pub factors: Vec<DMatrix<f64>>,
}

fn softmax_weights(log_p: &[f64]) -> Vec<f64> {
    let finite = log_p.iter().any(|v| v.is_finite());
    if !finite {
        log::warn!("every density underflowed; using equal weights");
        return vec![1.0 / log_p.len() as f64; log_p.len()];
    }
    let lse = log_sum_exp(log_p);
    log_p.iter().map(|v| (v - lse).exp()).collect()
}

fn weighted_sum(metrics: &[DMatrix<f64>], weights: &[f64]) -> DMatrix<f64> {
    if weights.iter().all(|w| *w == weights[0]) {
        let mut acc = metrics[0].clone();
        for m in &metrics[1..] {
            acc += m;
        }
        return acc / metrics.len() as f64;
    }
    let mut acc = &metrics[0] * weights[0];
    for (m, &w) in metrics.iter().zip(weights).skip(1) {
        acc += m * w;
    }
    acc
}

/// Iterative density-weighted average of local metrics.
///
/// Each iteration estimates a density at the (transformed) training points,
/// averages the local metrics with the normalised densities as weights, and
/// maps the data through the square root of that average. The returned
/// metric composes every factor: `M = (L_K···L₁)ᵀ(L_K···L₁)`.
pub fn density_weighted_combination(
    train: &LabeledDataset,
    validation: Option<&LabeledDataset>,
    locals: &[MetricMatrix],
    config: &DensityWeightedConfig,
) -> Result<DensityWeightedResult> {
    if config.max_iter < 1 {
        return Err(Error::InvalidParameter("max_iter must be at least 1".into()));
    }
    if locals.len() != train.len() {
        return Err(Error::DimensionMismatch {
            expected: train.len(),
            found: locals.len(),
        });
    }
    let dim = train.dim();
    if let Some(v) = validation {
        if v.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: v.dim(),
            });
        }
    }
    let n = train.len();
    let mut current: Vec<DMatrix<f64>> = locals.iter().map(|m| m.matrix().clone()).collect();
    let mut total = DMatrix::<f64>::identity(dim, dim);
    let mut z = train.features().clone();
    let mut zv = validation.map(|v| v.features().clone());
    let mut weights_hist: Vec<Vec<f64>> = Vec::new();
    let mut estimators = Vec::new();
    let mut changes = Vec::new();
    let mut factors = Vec::new();
    let mut last_metric = None;

    for iter in 0..config.max_iter {
        let rows = Rows::from_matrix(&z);
        let (weights, est) = match &config.estimator {
            EstimatorKind::Uniform => (vec![1.0 / n as f64; n], DensityEstimator::Uniform),
            EstimatorKind::Fixed { weights } => {
                if weights.len() != n || weights.iter().any(|w| !(*w >= 0.0)) {
                    return Err(Error::InvalidParameter("fixed weights must be n non-negative values".into()));
                }
                let s: f64 = weights.iter().sum();
                if !(s > 0.0) {
                    return Err(Error::InvalidParameter("fixed weights sum to zero".into()));
                }
                (weights.iter().map(|w| w / s).collect(), DensityEstimator::Fixed)
            }
            EstimatorKind::Kde { bandwidth } => {
                let vrows = zv.as_ref().map(Rows::from_matrix);
                let sigma = match bandwidth {
                    Some(s) if *s > 0.0 => *s,
                    Some(_) => return Err(Error::InvalidParameter("bandwidth must be positive".into())),
                    None => select_kde_bandwidth(&rows, vrows.as_ref(), config.seed.wrapping_add(iter as u64))?,
                };
                let log_p = par::map_range(n, |i| kde_log_density(&rows, sigma, rows.row(i)));
                (softmax_weights(&log_p), DensityEstimator::Kde { sigma })
            }
            EstimatorKind::Gmm { reclassify_k } => {
                let labels = match (&zv, validation) {
                    (Some(zv), Some(v)) => {
                        let vrows = Rows::from_matrix(zv);
                        let k = (*reclassify_k).clamp(1, vrows.len());
                        (0..n)
                            .map(|i| knn_vote(&vrows, v.labels(), v.class_count(), k, rows.row(i)))
                            .collect()
                    }
                    _ => train.labels().to_vec(),
                };
                let relabeled = LabeledDataset::new(z.clone(), labels, train.class_count())?;
                let (ms, _) = fit_gaussian_models_lenient(&relabeled, config.lambda_cov, 2)?;
                let log_p: Vec<f64> = (0..n).map(|i| ms.mixture_log_density(rows.row(i))).collect();
                let classes = ms.models().iter().map(|m| m.class()).collect();
                (softmax_weights(&log_p), DensityEstimator::Gmm { classes })
            }
        };

        if config.ms_refit && iter > 0 {
            let zds = train.with_features(z.clone())?;
            let ms = fit_gaussian_models(&zds, config.lambda_cov)?;
            current = compute_all_local_metrics(&zds, &ms, config.eps_rel)?
                .into_iter()
                .map(|m| m.matrix().clone())
                .collect();
        }
        let m = linalg::symmetrize(&weighted_sum(&current, &weights));
        let l = linalg::sqrt_psd(&m, 1e-10)?;
        let l_inv = l
            .clone()
            .try_inverse()
            .ok_or(Error::SingularMetric)?;

        if let Some(prev) = weights_hist.last() {
            let change: f64 = prev.iter().zip(&weights).map(|(a, b): (&f64, &f64)| (a - b).abs()).sum();
            changes.push(change);
        }
        weights_hist.push(weights);
        estimators.push(est);

        total = &l * total;
        z = &z * l.transpose();
        zv = zv.map(|v| &v * l.transpose());
        if !config.ms_refit {
            let l_inv_t = l_inv.transpose();
            current = current.iter().map(|mi| linalg::symmetrize(&(&l_inv_t * mi * &l_inv))).collect();
        }
        factors.push(l);
        last_metric = Some(m);
    }

    let matrix = if config.max_iter == 1 {
        last_metric.expect("one iteration ran")
    } else {
        linalg::symmetrize(&(total.transpose() * &total))
    };
    let method = match config.estimator {
        EstimatorKind::Kde { .. } => "KDE",
        EstimatorKind::Gmm { .. } => "GMM",
        EstimatorKind::Uniform => "UNI",
        EstimatorKind::Fixed { .. } => "FIXED",
    };
    Ok(DensityWeightedResult {
        metric: MetricMatrix::from_parts(
            matrix,
            Provenance::Global {
                method: method.into(),
            },
            false,
            false,
        ),
        config: config.clone(),
        weights: weights_hist,
        estimators,
        weight_changes: changes,
        factors,
    })
}

/// Covariance check of the uniform combination.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovarianceReport {
    /// `‖mean Q_i − cI‖_F / (c√D)` with `c = trace(mean Q_i)/D`.
    pub residual: f64,
    /// Same quantity for metrics re-solved from scratch in the new
    /// coordinates (the closed-form solver picks one minimiser of a
    /// non-unique problem, so this need not vanish).
    pub recomputed_residual: f64,
    /// Largest `|Trace[Q_i⁻¹Ψ_i]| / (‖Q_i⁻¹‖_F‖Ψ_i‖_F)` over points, with
    /// `Ψ_i` the bias matrix of Gaussians refit in the new coordinates.
    pub max_trace_violation: f64,
    /// Largest `|log det Q_i|`.
    pub max_log_det: f64,
    /// Points whose transported metric failed the check and was replaced by
    /// a fresh solution.
    pub replaced: usize,
    /// Points excluded because their bias matrix vanished.
    pub degenerate: usize,
}

fn spread_residual(mean: &DMatrix<f64>) -> f64 {
    let d = mean.nrows() as f64;
    let c = mean.trace() / d;
    let diff = mean - DMatrix::<f64>::identity(mean.nrows(), mean.nrows()) * c;
    diff.norm() / (c * d.sqrt())
}

/// Maps the data through `L = √M`, carries the class Gaussians there and
/// checks that the local metrics carried into the new coordinates,
/// `Q_i = |L|^{2/D} L⁻¹M_iL⁻ᵀ`, are minimisers for the refit models and
/// average to a multiple of the identity.
pub fn covariance_diagnostics(
    train: &LabeledDataset,
    metric: &MetricMatrix,
    lambda_cov: f64,
) -> Result<CovarianceReport> {
    let dim = train.dim();
    if metric.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: metric.dim(),
        });
    }
    let eps = crate::local_metric::DEFAULT_EPS_REL;
    let ms_x = fit_gaussian_models(train, lambda_cov)?;
    let locals = compute_all_local_metrics(train, &ms_x, eps)?;

    let factor = metric_sqrt_transform(metric)?;
    let l_inv = factor.l.clone().try_inverse().ok_or(Error::SingularMetric)?;
    let log_det_l = metric.log_det() / 2.0;
    let scale = (2.0 * log_det_l / dim as f64).exp();
    let z = factor.transform_matrix(train.features());
    let zds = train.with_features(z)?;
    let ms_z = transport_models(&ms_x, &factor.l)?;

    struct PointCheck {
        q: Option<DMatrix<f64>>,
        fresh: Option<DMatrix<f64>>,
        violation: f64,
        replaced: bool,
    }
    let checks = par::map_range(train.len(), |i| -> Result<PointCheck> {
        if locals[i].is_degenerate() {
            return Ok(PointCheck { q: None, fresh: None, violation: 0.0, replaced: false });
        }
        let zi = zds.point_vec(i);
        let psi = phi_matrix(&zi, &ms_z)?;
        if psi.degenerate {
            return Ok(PointCheck { q: None, fresh: None, violation: 0.0, replaced: false });
        }
        let fresh = solve_local_metric(&psi.matrix, eps)?;
        let q = linalg::symmetrize(&(&l_inv * locals[i].matrix() * l_inv.transpose() * scale));
        let q_inv = q.clone().try_inverse().ok_or(Error::SingularMetric)?;
        let denom = q_inv.norm() * psi.matrix.norm();
        let violation = if denom > 0.0 {
            (&q_inv * &psi.matrix).trace().abs() / denom
        } else {
            0.0
        };
        let ok = violation < 1e-8;
        Ok(PointCheck {
            q: Some(if ok { q } else { fresh.matrix().clone() }),
            fresh: Some(fresh.matrix().clone()),
            violation,
            replaced: !ok,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let kept: Vec<&PointCheck> = checks.iter().filter(|c| c.q.is_some()).collect();
    let degenerate = checks.len() - kept.len();
    if kept.is_empty() || dim == 1 {
        return Ok(CovarianceReport {
            residual: 0.0,
            recomputed_residual: 0.0,
            max_trace_violation: kept.iter().map(|c| c.violation).fold(0.0, f64::max),
            max_log_det: 0.0,
            replaced: kept.iter().filter(|c| c.replaced).count(),
            degenerate,
        });
    }
    let k = kept.len() as f64;
    let mut mean_q = DMatrix::zeros(dim, dim);
    let mut mean_fresh = DMatrix::zeros(dim, dim);
    let mut max_log_det = 0.0_f64;
    for c in &kept {
        let q = c.q.as_ref().expect("kept");
        mean_q += q;
        mean_fresh += c.fresh.as_ref().expect("kept");
        let ld: f64 = linalg::sym_eigen_desc(q).0.iter().map(|v| v.ln()).sum();
        max_log_det = max_log_det.max(ld.abs());
    }
    mean_q /= k;
    mean_fresh /= k;
    Ok(CovarianceReport {
        residual: spread_residual(&mean_q),
        recomputed_residual: spread_residual(&mean_fresh),
        max_trace_violation: kept.iter().map(|c| c.violation).fold(0.0, f64::max),
        max_log_det,
        replaced: kept.iter().filter(|c| c.replaced).count(),
        degenerate,
    })
}

/// Gaussians of `ms` pushed through `z = Lx`: means `Lμ`, covariances
/// `LΣLᵀ`. Without covariance regularisation this equals refitting on the
/// transformed data; with it, it keeps the ridge attached to the original
/// coordinates.
pub fn transport_models(ms: &GenerativeModelSet, l: &DMatrix<f64>) -> Result<GenerativeModelSet> {
    let models = ms
        .models()
        .iter()
        .map(|m| {
            let cov = linalg::symmetrize(&(l * m.covariance() * l.transpose()));
            GaussianModel::new(l * m.mean(), cov, m.prior()).map(|g| g.with_class(m.class()))
        })
        .collect::<Result<Vec<_>>>()?;
    GenerativeModelSet::new(models, ms.regularizer())
}

/// Residual of [`covariance_diagnostics`].
pub fn covariance_residual(train: &LabeledDataset, metric: &MetricMatrix, lambda_cov: f64) -> Result<f64> {
    Ok(covariance_diagnostics(train, metric, lambda_cov)?.residual)
}
