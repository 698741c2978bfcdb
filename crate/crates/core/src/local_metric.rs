//! Per-point metrics from the bias matrix Φ, Euclidean interpolation, and
//! regional averages.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::generative::{phi_matrix, GenerativeModelSet};
use crate::linalg::{self, matrix_serde};
use crate::par;
use crate::unsupervised::kmeans;

/// Relative threshold under which an eigenvalue of Φ counts as zero.
pub const DEFAULT_EPS_REL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Local { point: usize },
    Regional { cluster: usize },
    Global { method: String },
    Euclidean,
}

/// Symmetric PSD matrix defining `d(x, x') = (x − x')ᵀM(x − x')`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricMatrix {
    #[serde(with = "matrix_serde")]
    matrix: DMatrix<f64>,
    provenance: Provenance,
    det_normalized: bool,
    #[serde(default)]
    degenerate: bool,
}

impl MetricMatrix {
    pub fn identity(dim: usize) -> Self {
        Self {
            matrix: DMatrix::identity(dim, dim),
            provenance: Provenance::Euclidean,
            det_normalized: true,
            degenerate: false,
        }
    }

    /// Validates symmetry (1e-12 relative) and PSD-ness (min eigenvalue ≥
    /// −1e-10·max eigenvalue) and stores the exactly symmetrised matrix.
    pub fn new(matrix: DMatrix<f64>, provenance: Provenance) -> Result<Self> {
        if !matrix.is_square() || matrix.nrows() == 0 {
            return Err(Error::InvalidParameter("metric must be a non-empty square matrix".into()));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("metric has non-finite entries".into()));
        }
        let asym = linalg::max_asymmetry(&matrix);
        if asym > 1e-12 * linalg::max_abs(&matrix).max(f64::MIN_POSITIVE) {
            return Err(Error::NotSymmetric(asym));
        }
        let matrix = linalg::symmetrize(&matrix);
        let (values, _) = linalg::sym_eigen_desc(&matrix);
        let (top, bottom) = (values[0], values[values.len() - 1]);
        if bottom < -1e-10 * top.max(0.0) {
            return Err(Error::NegativeEigenvalue(bottom));
        }
        Ok(Self {
            matrix,
            provenance,
            det_normalized: false,
            degenerate: false,
        })
    }

    pub(crate) fn from_parts(
        matrix: DMatrix<f64>,
        provenance: Provenance,
        det_normalized: bool,
        degenerate: bool,
    ) -> Self {
        Self {
            matrix,
            provenance,
            det_normalized,
            degenerate,
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn is_det_normalized(&self) -> bool {
        self.det_normalized
    }

    /// Set for identity metrics produced in place of an undefined solution.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub(crate) fn mark_degenerate(mut self) -> Self {
        self.degenerate = true;
        self
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        linalg::sym_eigen_desc(&self.matrix).0
    }

    /// Sum of log-eigenvalues (−∞ for singular metrics).
    pub fn log_det(&self) -> f64 {
        self.eigenvalues()
            .iter()
            .map(|v| if *v > 0.0 { v.ln() } else { f64::NEG_INFINITY })
            .sum()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            matrix: &self.matrix * s,
            provenance: self.provenance.clone(),
            det_normalized: self.det_normalized && s == 1.0,
            degenerate: self.degenerate,
        }
    }

    /// Rescales to unit determinant through the mean log-eigenvalue.
    pub fn det_normalized(&self) -> Result<Self> {
        let (values, vectors) = linalg::sym_eigen_desc(&self.matrix);
        let normalized = normalize_spectrum(&values).ok_or(Error::SingularMetric)?;
        Ok(Self {
            matrix: linalg::recompose(&vectors, &normalized),
            provenance: self.provenance.clone(),
            det_normalized: true,
            degenerate: self.degenerate,
        })
    }
}

/// Divides every eigenvalue by `exp(mean log λ)`, giving product one.
fn normalize_spectrum(values: &[f64]) -> Option<Vec<f64>> {
    if values.iter().any(|v| !(*v > 0.0)) {
        return None;
    }
    let mean_log = values.iter().map(|v| v.ln()).sum::<f64>() / values.len() as f64;
    Some(values.iter().map(|v| (v.ln() - mean_log).exp()).collect())
}

/// Eigen-structure of Φ as used by the local solver.
#[derive(Debug, Clone)]
pub struct SpectralSolution {
    /// Eigenvalues of Φ, descending.
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: DMatrix<f64>,
    /// Eigenvalues above `ε·max|λ|`.
    pub d_plus: usize,
    /// Eigenvalues below `−ε·max|λ|`.
    pub d_minus: usize,
    pub zero_count: usize,
    /// Φ is (numerically) zero.
    pub degenerate: bool,
}

impl SpectralSolution {
    pub fn is_indefinite(&self) -> bool {
        self.d_plus > 0 && self.d_minus > 0
    }
}

pub fn spectral_decomposition(phi: &DMatrix<f64>, eps_rel: f64) -> Result<SpectralSolution> {
    if !phi.is_square() || phi.nrows() == 0 {
        return Err(Error::InvalidParameter("Φ must be a non-empty square matrix".into()));
    }
    if phi.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("Φ has non-finite entries".into()));
    }
    let scale = linalg::max_abs(phi);
    let asym = linalg::max_asymmetry(phi);
    if asym > 1e-8 * scale {
        return Err(Error::NotSymmetric(asym));
    }
    let (eigenvalues, eigenvectors) = linalg::sym_eigen_desc(&linalg::symmetrize(phi));
    let top = eigenvalues.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let threshold = eps_rel * top;
    let d_plus = eigenvalues.iter().filter(|v| **v > threshold).count();
    let d_minus = eigenvalues.iter().filter(|v| **v < -threshold).count();
    Ok(SpectralSolution {
        zero_count: eigenvalues.len() - d_plus - d_minus,
        degenerate: top == 0.0,
        eigenvalues,
        eigenvectors,
        d_plus,
        d_minus,
    })
}

/// Closed-form minimiser of `(Trace[M⁻¹Φ])²` subject to `|M| = 1`, `M ⪰ 0`.
///
/// For indefinite Φ the metric shares Φ's eigenvectors with eigenvalues
/// `d⁺λ` on the positive block and `−d⁻λ` on the negative block, which
/// zeroes the trace. A definite Φ is replaced by `±Φ` (the positive-definite
/// case is the true minimiser). Directions with `|λ| ≤ ε·max|λ|` get the
/// geometric mean of the other entries so they neither contribute to the
/// trace nor skew the determinant. Φ ≈ 0 gives the identity, flagged
/// degenerate. The result is scaled to unit determinant.
pub fn solve_local_metric(phi: &DMatrix<f64>, eps_rel: f64) -> Result<MetricMatrix> {
    let spectrum = spectral_decomposition(phi, eps_rel)?;
    Ok(metric_from_spectrum(&spectrum, Provenance::Local { point: 0 }))
}

pub(crate) fn metric_from_spectrum(s: &SpectralSolution, provenance: Provenance) -> MetricMatrix {
    let dim = s.eigenvalues.len();
    if s.degenerate || s.d_plus + s.d_minus == 0 {
        return MetricMatrix::identity(dim)
            .with_provenance(provenance)
            .mark_degenerate();
    }
    let threshold_pos = |i: usize| i < s.d_plus;
    let threshold_neg = |i: usize| i >= dim - s.d_minus;
    let (plus_w, minus_w) = if s.is_indefinite() {
        (s.d_plus as f64, s.d_minus as f64)
    } else {
        (1.0, 1.0)
    };
    let mut entries = vec![0.0; dim];
    let mut log_sum = 0.0;
    for (i, &lambda) in s.eigenvalues.iter().enumerate() {
        if threshold_pos(i) {
            entries[i] = plus_w * lambda;
        } else if threshold_neg(i) {
            entries[i] = -minus_w * lambda;
        } else {
            continue;
        }
        log_sum += entries[i].ln();
    }
    if s.zero_count > 0 {
        let fill = (log_sum / (s.d_plus + s.d_minus) as f64).exp();
        for e in entries[s.d_plus..dim - s.d_minus].iter_mut() {
            *e = fill;
        }
    }
    let entries = normalize_spectrum(&entries).expect("entries are positive");
    MetricMatrix::from_parts(
        linalg::recompose(&s.eigenvectors, &entries),
        provenance,
        true,
        false,
    )
}

/// `(1 − λ)M + λI`, renormalised to unit determinant when `M` was.
pub fn interpolate_with_euclidean(metric: &MetricMatrix, lambda: f64) -> Result<MetricMatrix> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidParameter(format!(
            "interpolation weight {lambda} outside [0, 1]"
        )));
    }
    if lambda == 0.0 {
        return Ok(metric.clone());
    }
    let dim = metric.dim();
    let blended = metric.matrix() * (1.0 - lambda) + DMatrix::<f64>::identity(dim, dim) * lambda;
    let out = MetricMatrix::from_parts(
        blended,
        metric.provenance().clone(),
        false,
        metric.is_degenerate(),
    );
    if metric.is_det_normalized() {
        out.det_normalized()
    } else {
        Ok(out)
    }
}

/// Local metric at an arbitrary point.
pub fn local_metric_at(x: &[f64], ms: &GenerativeModelSet, eps_rel: f64) -> Result<MetricMatrix> {
    let phi = phi_matrix(x, ms)?;
    if phi.degenerate {
        return Ok(MetricMatrix::identity(ms.dim()).mark_degenerate());
    }
    solve_local_metric(&phi.matrix, eps_rel)
}

/// One unit-determinant metric per training point, in row order.
pub fn compute_all_local_metrics(
    train: &LabeledDataset,
    ms: &GenerativeModelSet,
    eps_rel: f64,
) -> Result<Vec<MetricMatrix>> {
    if train.dim() != ms.dim() {
        return Err(Error::DimensionMismatch {
            expected: ms.dim(),
            found: train.dim(),
        });
    }
    let x = train.features();
    par::map_range(train.len(), |i| {
        let point: Vec<f64> = x.row(i).iter().copied().collect();
        local_metric_at(&point, ms, eps_rel)
            .map(|m| m.with_provenance(Provenance::Local { point: i }))
    })
    .into_iter()
    .collect()
}

/// Arithmetic mean of `metrics[i]` over `indices`, summed in index order.
pub(crate) fn mean_matrix<'a>(metrics: impl IntoIterator<Item = &'a MetricMatrix>) -> Option<DMatrix<f64>> {
    let mut iter = metrics.into_iter();
    let mut acc = iter.next()?.matrix().clone();
    let mut count = 1usize;
    for m in iter {
        acc += m.matrix();
        count += 1;
    }
    Some(acc / count as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionalMetrics {
    pub metrics: Vec<MetricMatrix>,
    /// Cluster id of every training point.
    pub assignment: Vec<usize>,
}

/// Partitions the points with Euclidean k-means (10 restarts) and averages
/// the local metrics inside each part. With `parts == 1` this is the uniform
/// combination.
pub fn regional_metrics(
    locals: &[MetricMatrix],
    features: &DMatrix<f64>,
    parts: usize,
    seed: u64,
) -> Result<RegionalMetrics> {
    if locals.is_empty() {
        return Err(Error::EmptyInput("local metrics"));
    }
    if locals.len() != features.nrows() {
        return Err(Error::DimensionMismatch {
            expected: features.nrows(),
            found: locals.len(),
        });
    }
    if parts == 0 || parts > locals.len() {
        return Err(Error::InvalidParameter(format!(
            "number of regions {parts} must lie in 1..={}",
            locals.len()
        )));
    }
    let assignment = if parts == 1 {
        vec![0; locals.len()]
    } else {
        let identity = MetricMatrix::identity(features.ncols());
        kmeans(features, parts, &identity, seed, 10)?.assignments
    };
    let metrics = (0..parts)
        .map(|p| {
            let members = locals
                .iter()
                .zip(&assignment)
                .filter(|(_, &a)| a == p)
                .map(|(m, _)| m);
            let matrix = mean_matrix(members).ok_or(Error::EmptyInput("region"))?;
            Ok(MetricMatrix::from_parts(
                matrix,
                Provenance::Regional { cluster: p },
                false,
                false,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RegionalMetrics {
        metrics,
        assignment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    fn diag(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(v))
    }

    fn trace_inv_product(m: &DMatrix<f64>, phi: &DMatrix<f64>) -> f64 {
        (m.clone().try_inverse().unwrap() * phi).trace()
    }

    #[test]
    fn indefinite_diagonal_example() {
        let phi = diag(&[2.0, -1.0]);
        let m = solve_local_metric(&phi, DEFAULT_EPS_REL).unwrap();
        let expected = diag(&[2f64.sqrt(), 2f64.sqrt() / 2.0]);
        assert!((m.matrix() - expected).abs().max() < 1e-12);
        assert!(m.log_det().abs() < 1e-12);
        assert!(trace_inv_product(m.matrix(), &phi).abs() < 1e-12);
    }

    #[test]
    fn zero_phi_gives_flagged_identity() {
        let m = solve_local_metric(&DMatrix::zeros(3, 3), DEFAULT_EPS_REL).unwrap();
        assert!(m.is_degenerate());
        assert_eq!(m.matrix(), &DMatrix::identity(3, 3));
    }

    #[test]
    fn positive_definite_fallback_is_scaled_phi() {
        let m = solve_local_metric(&diag(&[8.0, 2.0]), DEFAULT_EPS_REL).unwrap();
        assert!((m.matrix() - diag(&[2.0, 0.5])).abs().max() < 1e-12);
    }

    #[test]
    fn negative_definite_fallback_is_scaled_negation() {
        let m = solve_local_metric(&diag(&[-1.0, -4.0]), DEFAULT_EPS_REL).unwrap();
        assert!((m.matrix() - diag(&[0.5, 2.0])).abs().max() < 1e-12);
    }

    #[test]
    fn zero_directions_are_neutral() {
        let phi = diag(&[3.0, 0.0, -1.0]);
        let m = solve_local_metric(&phi, DEFAULT_EPS_REL).unwrap();
        // entries 3, 1 → fill √3; normalised by (3·√3·1)^(1/3) = √3
        let expected = diag(&[3f64.sqrt(), 1.0, 1.0 / 3f64.sqrt()]);
        assert!((m.matrix() - expected).abs().max() < 1e-12);
        assert!(trace_inv_product(m.matrix(), &phi).abs() < 1e-12);
    }

    #[test]
    fn rejects_asymmetric_phi() {
        let phi = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.5, 1.0]);
        assert!(matches!(solve_local_metric(&phi, DEFAULT_EPS_REL), Err(Error::NotSymmetric(_))));
    }

    #[test]
    fn interpolation_examples() {
        let m = MetricMatrix::from_parts(diag(&[2.0, 0.5]), Provenance::Euclidean, true, false);
        let one = interpolate_with_euclidean(&m, 1.0).unwrap();
        assert!((one.matrix() - DMatrix::identity(2, 2)).abs().max() < 1e-15);
        let zero = interpolate_with_euclidean(&m, 0.0).unwrap();
        assert_eq!(zero.matrix(), m.matrix());
        let half = interpolate_with_euclidean(&m, 0.5).unwrap();
        let s = 1.125f64.sqrt();
        assert!((half.matrix() - diag(&[1.5 / s, 0.75 / s])).abs().max() < 1e-12);
        assert!((half.matrix()[(0, 0)] - std::f64::consts::SQRT_2).abs() < 1e-6);
        assert!((half.matrix()[(1, 1)] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        assert!(interpolate_with_euclidean(&m, 1.5).is_err());
    }

    #[test]
    fn metric_validation() {
        assert!(MetricMatrix::new(diag(&[1.0, -1.0]), Provenance::Euclidean).is_err());
        assert!(MetricMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.2, 1.0]), Provenance::Euclidean).is_err());
        assert!(MetricMatrix::new(diag(&[1.0, 0.0]), Provenance::Euclidean).is_ok());
    }

    #[test]
    fn regional_rejects_bad_part_count() {
        let locals = vec![MetricMatrix::identity(1); 3];
        let x = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 2.0]);
        assert!(regional_metrics(&locals, &x, 0, 0).is_err());
        assert!(regional_metrics(&locals, &x, 4, 0).is_err());
    }
}
