//! Metric RBF kernels, an SMO solver for the soft-margin SVM dual, and
//! simplex-constrained multiple kernel learning.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::global_metric::{metric_sqrt_transform, MAX_MEDIAN_PAIRS};
use crate::linalg::{self, Rows};
use crate::local_metric::MetricMatrix;
use crate::par;

/// Inverse bandwidth multipliers `2^-6, …, 2^8`.
pub fn default_tau_grid() -> Vec<f64> {
    (-6..=8).map(|e| 2f64.powi(e)).collect()
}

/// Box constraints searched during tuning.
pub const DEFAULT_C_GRID: [f64; 4] = [0.1, 1.0, 10.0, 100.0];

/// `exp(−(x − x')ᵀM(x − x')/σ²)` with `σ² = σ₀²/τ`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaseKernel {
    pub metric: MetricMatrix,
    pub sigma_sq: f64,
    pub tau: f64,
    /// Median pairwise metric distance of the training data.
    pub sigma0_sq: f64,
}

impl BaseKernel {
    pub fn new(metric: MetricMatrix, sigma_sq: f64) -> Result<Self> {
        if !(sigma_sq > 0.0) || !sigma_sq.is_finite() {
            return Err(Error::InvalidParameter("kernel bandwidth must be positive".into()));
        }
        Ok(Self {
            metric,
            sigma_sq,
            tau: 1.0,
            sigma0_sq: sigma_sq,
        })
    }
}

pub fn rbf_metric_kernel(kernel: &BaseKernel, x: &[f64], y: &[f64]) -> f64 {
    (-crate::classify::mahalanobis_distance(&kernel.metric, x, y) / kernel.sigma_sq).exp()
}

/// `σ² = σ₀²(M)/τ` for every metric and τ, metric-major. `σ₀²(M)` is the
/// median metric distance over training pairs (at most a million, sampled
/// with `seed`).
pub fn build_kernel_bank(
    metrics: &[MetricMatrix],
    tau_grid: &[f64],
    x_train: &DMatrix<f64>,
    seed: u64,
) -> Result<Vec<BaseKernel>> {
    if metrics.is_empty() || tau_grid.is_empty() {
        return Err(Error::EmptyInput("metrics or tau grid"));
    }
    if tau_grid.iter().any(|t| !(*t > 0.0)) {
        return Err(Error::InvalidParameter("tau values must be positive".into()));
    }
    let mut bank = Vec::with_capacity(metrics.len() * tau_grid.len());
    for metric in metrics {
        let l = metric_sqrt_transform(metric)?.l;
        let rows = Rows::transformed(x_train, &l);
        let sigma0_sq = linalg::median_pairwise_sq_dist(&rows, MAX_MEDIAN_PAIRS, seed)
            .ok_or(Error::EmptyInput("training points"))?;
        if !(sigma0_sq > 0.0) {
            return Err(Error::DegeneratePairwiseDistances);
        }
        for &tau in tau_grid {
            bank.push(BaseKernel {
                metric: metric.clone(),
                sigma_sq: sigma0_sq / tau,
                tau,
                sigma0_sq,
            });
        }
    }
    Ok(bank)
}

/// `K[m, n] = k(a_m, b_n)`.
pub fn cross_gram(kernel: &BaseKernel, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let l = metric_sqrt_transform(&kernel.metric)?.l;
    let ra = Rows::transformed(a, &l);
    let rb = Rows::transformed(b, &l);
    let rows = par::map_range(ra.len(), |m| {
        (0..rb.len())
            .map(|n| (-linalg::sq_dist(ra.row(m), rb.row(n)) / kernel.sigma_sq).exp())
            .collect::<Vec<f64>>()
    });
    Ok(DMatrix::from_fn(ra.len(), rb.len(), |m, n| rows[m][n]))
}

/// Symmetric Gram matrix with unit diagonal.
pub fn gram_matrix(kernel: &BaseKernel, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut k = cross_gram(kernel, x, x)?;
    k = linalg::symmetrize(&k);
    k.fill_diagonal(1.0);
    Ok(k)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SvmSolution {
    pub beta: Vec<f64>,
    pub bias: f64,
    /// Dual objective `Σβ − ½βᵀ(y∘K∘y)β`.
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Maximal violating-pair gap at exit.
    pub gap: f64,
}

impl SvmSolution {
    /// `Σ_i β_i y_i k_i + b` for a column of kernel values `k_i`.
    pub fn decision(&self, y: &[f64], kernel_column: &[f64]) -> f64 {
        self.beta
            .iter()
            .zip(y)
            .zip(kernel_column)
            .map(|((b, yi), k)| b * yi * k)
            .sum::<f64>()
            + self.bias
    }
}

/// Stopping tolerance of the SMO solver.
pub const SVM_TOLERANCE: f64 = 1e-4;

fn check_labels(y: &[f64]) -> Result<()> {
    if y.iter().any(|v| *v != 1.0 && *v != -1.0) {
        return Err(Error::InvalidParameter("labels must be +1 or -1".into()));
    }
    Ok(())
}

/// Soft-margin SVM dual, `max Σβ − ½βᵀ(y∘K∘y)β` subject to `0 ≤ β ≤ C`,
/// `Σβy = 0`, by SMO with second-order working-set selection. Stops when
/// the maximal violating-pair gap drops below [`SVM_TOLERANCE`].
pub fn svm_solve(k: &DMatrix<f64>, y: &[f64], c: f64) -> Result<SvmSolution> {
    let n = y.len();
    if k.nrows() != n || k.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: k.nrows(),
        });
    }
    if n == 0 {
        return Err(Error::EmptyInput("training labels"));
    }
    if !(c > 0.0) {
        return Err(Error::InvalidParameter("C must be positive".into()));
    }
    check_labels(y)?;
    let q = |i: usize, j: usize| y[i] * y[j] * k[(i, j)];
    let mut alpha = vec![0.0; n];
    // gradient of ½αᵀQα − eᵀα
    let mut grad = vec![-1.0; n];
    let max_iter = (100 * n).max(1_000_000);
    let tau = 1e-12;
    let is_up = |a: f64, yi: f64| (yi > 0.0 && a < c) || (yi < 0.0 && a > 0.0);
    let is_low = |a: f64, yi: f64| (yi > 0.0 && a > 0.0) || (yi < 0.0 && a < c);
    let mut iterations = 0;
    let mut gap;
    let mut converged = false;
    loop {
        let mut i = usize::MAX;
        let mut g_max = f64::NEG_INFINITY;
        for t in 0..n {
            if is_up(alpha[t], y[t]) {
                let v = -y[t] * grad[t];
                if v > g_max {
                    g_max = v;
                    i = t;
                }
            }
        }
        let mut g_min = f64::INFINITY;
        let mut j = usize::MAX;
        let mut best_obj = f64::INFINITY;
        for t in 0..n {
            if !is_low(alpha[t], y[t]) {
                continue;
            }
            let v = -y[t] * grad[t];
            g_min = g_min.min(v);
            if i != usize::MAX && v < g_max {
                let b = g_max - v;
                let mut a = k[(i, i)] + k[(t, t)] - 2.0 * k[(i, t)];
                if a <= 0.0 {
                    a = tau;
                }
                let obj = -(b * b) / a;
                if obj < best_obj {
                    best_obj = obj;
                    j = t;
                }
            }
        }
        gap = g_max - g_min;
        if i == usize::MAX || j == usize::MAX || gap < SVM_TOLERANCE {
            converged = true;
            break;
        }
        if iterations >= max_iter {
            log::warn!("SMO stopped at the iteration cap with gap {gap:e}");
            break;
        }
        iterations += 1;

        let (old_i, old_j) = (alpha[i], alpha[j]);
        if y[i] != y[j] {
            let mut quad = k[(i, i)] + k[(j, j)] - 2.0 * k[(i, j)];
            if quad <= 0.0 {
                quad = tau;
            }
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let mut quad = k[(i, i)] + k[(j, j)] - 2.0 * k[(i, j)];
            if quad <= 0.0 {
                quad = tau;
            }
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for t in 0..n {
            grad[t] += q(t, i) * di + q(t, j) * dj;
        }
    }

    // ρ from free vectors, else the midpoint of the feasible interval
    let mut ub = f64::INFINITY;
    let mut lb = f64::NEG_INFINITY;
    let mut free_sum = 0.0;
    let mut free = 0usize;
    for t in 0..n {
        let yg = y[t] * grad[t];
        if alpha[t] >= c {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            free += 1;
            free_sum += yg;
        }
    }
    let rho = if free > 0 {
        free_sum / free as f64
    } else if ub.is_finite() && lb.is_finite() {
        0.5 * (ub + lb)
    } else if ub.is_finite() {
        ub
    } else if lb.is_finite() {
        lb
    } else {
        0.0
    };
    let objective = -alpha.iter().zip(&grad).map(|(a, g)| 0.5 * a * (g - 1.0)).sum::<f64>();
    Ok(SvmSolution {
        beta: alpha,
        bias: -rho,
        objective,
        iterations,
        converged,
        gap,
    })
}

/// Largest per-point KKT violation of `(β, b)`: margin shortfall for
/// `β = 0`, margin excess for `β = C`, and `|y f − 1|` for free points.
pub fn kkt_violation(k: &DMatrix<f64>, y: &[f64], c: f64, sol: &SvmSolution) -> f64 {
    let n = y.len();
    let mut worst = 0.0_f64;
    for i in 0..n {
        let col: Vec<f64> = (0..n).map(|j| k[(j, i)]).collect();
        let yf = y[i] * sol.decision(y, &col);
        let b = sol.beta[i];
        let v = if b <= 0.0 {
            (1.0 - yf).max(0.0)
        } else if b >= c {
            (yf - 1.0).max(0.0)
        } else {
            (yf - 1.0).abs()
        };
        worst = worst.max(v);
    }
    worst
}

/// Euclidean projection onto the probability simplex.
pub fn project_to_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        cumulative += ui;
        let t = (cumulative - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    let mut w: Vec<f64> = v.iter().map(|x| (x - theta).max(0.0)).collect();
    let s: f64 = w.iter().sum();
    for x in &mut w {
        *x /= s;
    }
    w
}

fn combine(grams: &[DMatrix<f64>], weights: &[f64]) -> DMatrix<f64> {
    let mut k = DMatrix::zeros(grams[0].nrows(), grams[0].ncols());
    for (g, &w) in grams.iter().zip(weights) {
        if w > 0.0 {
            k += g * w;
        }
    }
    k
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MklModel {
    /// Simplex weights over the base kernels.
    pub weights: Vec<f64>,
    pub beta: Vec<f64>,
    pub bias: f64,
    /// Training labels in ±1 form.
    pub y: Vec<f64>,
    /// Indices with `β > 0`.
    pub support: Vec<usize>,
    pub c: f64,
    /// SVM objective at every accepted weight vector.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
}

impl MklModel {
    /// Decision values for test points given per-kernel cross Gram matrices
    /// of shape (train × test).
    pub fn decision_values(&self, cross: &[DMatrix<f64>]) -> Result<Vec<f64>> {
        if cross.len() != self.weights.len() {
            return Err(Error::DimensionMismatch {
                expected: self.weights.len(),
                found: cross.len(),
            });
        }
        if let Some(bad) = cross.iter().find(|g| g.nrows() != self.y.len()) {
            return Err(Error::DimensionMismatch {
                expected: self.y.len(),
                found: bad.nrows(),
            });
        }
        let m = cross.first().map_or(0, DMatrix::ncols);
        let coeff: Vec<f64> = self.beta.iter().zip(&self.y).map(|(b, y)| b * y).collect();
        Ok((0..m)
            .map(|t| {
                let mut f = self.bias;
                for (g, &w) in cross.iter().zip(&self.weights) {
                    if w > 0.0 {
                        f += w * self.support.iter().map(|&i| coeff[i] * g[(i, t)]).sum::<f64>();
                    }
                }
                f
            })
            .collect())
    }
}

/// Learns simplex weights `α` for `K(α) = Σ α_k K_k` by projected gradient
/// descent on the optimal SVM dual value `J(α)`, with gradient
/// `∂J/∂α_k = −½βᵀ(y∘K_k∘y)β` and backtracking so that `J` never increases.
/// Stops when the weights move less than `tol` (ℓ₁) or `J` improves by less
/// than `tol·max(1, |J|)`.
pub fn mkl_train(grams: &[DMatrix<f64>], y: &[f64], c: f64, tol: f64) -> Result<MklModel> {
    if grams.is_empty() {
        return Err(Error::EmptyInput("kernel bank"));
    }
    let n = y.len();
    if let Some(bad) = grams.iter().find(|g| g.nrows() != n || g.ncols() != n) {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: bad.nrows(),
        });
    }
    check_labels(y)?;
    let p = grams.len();
    let mut weights = vec![1.0 / p as f64; p];
    let mut sol = svm_solve(&combine(grams, &weights), y, c)?;
    let mut history = vec![sol.objective];
    let mut step_scale = 1.0;
    let mut iterations = 0;
    const MAX_OUTER: usize = 200;
    while p > 1 && iterations < MAX_OUTER {
        iterations += 1;
        let yb: Vec<f64> = sol.beta.iter().zip(y).map(|(b, yi)| b * yi).collect();
        let grad: Vec<f64> = grams
            .iter()
            .map(|g| {
                let gv = g * nalgebra::DVector::from_column_slice(&yb);
                -0.5 * yb.iter().zip(gv.iter()).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        let spread = grad.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            - grad.iter().copied().fold(f64::INFINITY, f64::min);
        if !(spread > 0.0) {
            break;
        }
        let mut eta = step_scale * 2.0 / spread;
        let mut accepted = None;
        for _ in 0..40 {
            let trial: Vec<f64> = project_to_simplex(
                &weights
                    .iter()
                    .zip(&grad)
                    .map(|(w, g)| w - eta * g)
                    .collect::<Vec<_>>(),
            );
            let moved: f64 = trial.iter().zip(&weights).map(|(a, b)| (a - b).abs()).sum();
            if moved < 1e-12 {
                break;
            }
            let trial_sol = svm_solve(&combine(grams, &trial), y, c)?;
            if trial_sol.objective < sol.objective {
                accepted = Some((trial, trial_sol, moved));
                break;
            }
            eta *= 0.5;
        }
        let Some((trial, trial_sol, moved)) = accepted else {
            break;
        };
        let decrease = sol.objective - trial_sol.objective;
        // next search starts at twice the accepted step
        step_scale = (eta * spread).min(1e6);
        weights = trial;
        sol = trial_sol;
        history.push(sol.objective);
        if moved < tol || decrease < tol * sol.objective.abs().max(1.0) {
            break;
        }
    }
    let support = (0..n).filter(|&i| sol.beta[i] > 0.0).collect();
    Ok(MklModel {
        weights,
        beta: sol.beta,
        bias: sol.bias,
        y: y.to_vec(),
        support,
        c,
        objective_history: history,
        iterations,
    })
}

/// One binary MKL model per class (that class against the rest).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OneVsAllMkl {
    pub models: Vec<MklModel>,
    pub bank: Vec<BaseKernel>,
}

impl OneVsAllMkl {
    pub fn train(grams: &[DMatrix<f64>], bank: Vec<BaseKernel>, labels: &[usize], class_count: usize, c: f64, tol: f64) -> Result<Self> {
        if class_count < 2 {
            return Err(Error::InvalidParameter("need at least two classes".into()));
        }
        let models = par::map_range(class_count, |cls| {
            let y: Vec<f64> = labels.iter().map(|&l| if l == cls { 1.0 } else { -1.0 }).collect();
            mkl_train(grams, &y, c, tol)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Ok(Self { models, bank })
    }
}

/// Class with the largest one-vs-all decision value (lower class on ties),
/// given per-kernel cross Gram matrices (train × test).
pub fn mkl_predict(model: &OneVsAllMkl, cross: &[DMatrix<f64>]) -> Result<Vec<usize>> {
    let values = model
        .models
        .iter()
        .map(|m| m.decision_values(cross))
        .collect::<Result<Vec<_>>>()?;
    let m = values.first().map_or(0, Vec::len);
    Ok((0..m)
        .map(|t| {
            let mut best = 0;
            for c in 1..values.len() {
                if values[c][t] > values[best][t] {
                    best = c;
                }
            }
            best
        })
        .collect())
}

/// Sign of the binary decision value, as ±1.
pub fn mkl_predict_binary(model: &MklModel, cross: &[DMatrix<f64>]) -> Result<Vec<f64>> {
    Ok(model
        .decision_values(cross)?
        .into_iter()
        .map(|f| if f >= 0.0 { 1.0 } else { -1.0 })
        .collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MklGridEntry {
    pub c: f64,
    pub validation_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MklRunResult {
    pub selected_c: f64,
    pub validation_error: f64,
    pub test_error: f64,
    pub grid: Vec<MklGridEntry>,
    /// Kernel weights of every one-vs-all model at the selected C.
    pub weights: Vec<Vec<f64>>,
    pub kernel_count: usize,
}

/// Builds the bank for `metrics`, tunes C on validation and reports the
/// test error of the selected model.
#[allow(clippy::too_many_arguments)]
pub fn mkl_tune_and_test(
    train: &LabeledDataset,
    validation: &LabeledDataset,
    test: &LabeledDataset,
    metrics: &[MetricMatrix],
    tau_grid: &[f64],
    c_grid: &[f64],
    tol: f64,
    seed: u64,
) -> Result<MklRunResult> {
    if c_grid.is_empty() {
        return Err(Error::InvalidParameter("C grid is empty".into()));
    }
    let bank = build_kernel_bank(metrics, tau_grid, train.features(), seed)?;
    let grams = bank
        .iter()
        .map(|b| gram_matrix(b, train.features()))
        .collect::<Result<Vec<_>>>()?;
    let cross = |ds: &LabeledDataset| -> Result<Vec<DMatrix<f64>>> {
        bank.iter().map(|b| cross_gram(b, train.features(), ds.features())).collect()
    };
    let val_cross = cross(validation)?;
    let mut cs = c_grid.to_vec();
    cs.sort_by(f64::total_cmp);
    let mut grid = Vec::new();
    let mut best: Option<(f64, OneVsAllMkl)> = None;
    for &c in &cs {
        let model = OneVsAllMkl::train(&grams, bank.clone(), train.labels(), train.class_count(), c, tol)?;
        let pred = mkl_predict(&model, &val_cross)?;
        let err = crate::classify::error_rate(&pred, validation.labels());
        grid.push(MklGridEntry { c, validation_error: err });
        if best.as_ref().is_none_or(|b| err < b.0) {
            best = Some((err, model));
        }
    }
    let (validation_error, model) = best.expect("grid is non-empty");
    let selected_c = model.models[0].c;
    let pred = mkl_predict(&model, &cross(test)?)?;
    Ok(MklRunResult {
        selected_c,
        validation_error,
        test_error: crate::classify::error_rate(&pred, test.labels()),
        grid,
        weights: model.models.iter().map(|m| m.weights.clone()).collect(),
        kernel_count: bank.len(),
    })
}
