//! Gaussian class-conditional models: densities, Hessians, and the bias
//! matrix Φ whose trace against M⁻¹ drives the local metric.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::linalg::{self, matrix_serde, vector_serde};
use crate::local_metric::MetricMatrix;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Covariance regularisation weight used when none is given.
pub const DEFAULT_LAMBDA_COV: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GaussianModelRepr", into = "GaussianModelRepr")]
pub struct GaussianModel {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    precision: DMatrix<f64>,
    log_det: f64,
    prior: f64,
    class: usize,
}

#[derive(Serialize, Deserialize)]
struct GaussianModelRepr {
    class: usize,
    prior: f64,
    #[serde(with = "vector_serde")]
    mean: DVector<f64>,
    #[serde(with = "matrix_serde")]
    covariance: DMatrix<f64>,
}

impl From<GaussianModel> for GaussianModelRepr {
    fn from(m: GaussianModel) -> Self {
        Self {
            class: m.class,
            prior: m.prior,
            mean: m.mean,
            covariance: m.covariance,
        }
    }
}

impl TryFrom<GaussianModelRepr> for GaussianModel {
    type Error = Error;

    fn try_from(r: GaussianModelRepr) -> Result<Self> {
        let mut m = GaussianModel::new(r.mean, r.covariance, r.prior)?;
        m.class = r.class;
        Ok(m)
    }
}

impl GaussianModel {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>, prior: f64) -> Result<Self> {
        let d = mean.len();
        if covariance.shape() != (d, d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: covariance.nrows(),
            });
        }
        if !(prior > 0.0 && prior <= 1.0) {
            return Err(Error::InvalidParameter(format!("prior {prior} outside (0, 1]")));
        }
        let covariance = linalg::symmetrize(&covariance);
        let (precision, log_det) = linalg::spd_inverse_logdet(&covariance)
            .ok_or_else(|| Error::NotPositiveDefinite("class covariance".into()))?;
        Ok(Self {
            mean,
            covariance,
            precision,
            log_det,
            prior,
            class: 0,
        })
    }

    pub fn with_class(mut self, class: usize) -> Self {
        self.class = class;
        self
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn prior(&self) -> f64 {
        self.prior
    }

    /// Class id this model was fitted on.
    pub fn class(&self) -> usize {
        self.class
    }

    /// `(Σ⁻¹(x − μ), (x − μ)ᵀΣ⁻¹(x − μ))`
    pub fn whiten(&self, x: &[f64]) -> (DVector<f64>, f64) {
        let diff = DVector::from_column_slice(x) - &self.mean;
        let v = &self.precision * &diff;
        let quad = diff.dot(&v);
        (v, quad)
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let (_, quad) = self.whiten(x);
        -0.5 * (self.dim() as f64 * LN_2PI + self.log_det + quad)
    }

    /// Density value; exactly 0 once the log-density drops below the log of
    /// the smallest positive normal number.
    pub fn density(&self, x: &[f64]) -> f64 {
        let lp = self.log_density(x);
        if lp < f64::MIN_POSITIVE.ln() {
            0.0
        } else {
            lp.exp()
        }
    }

    /// `∇∇p(x) / p(x) = Σ⁻¹(x−μ)(x−μ)ᵀΣ⁻¹ − Σ⁻¹`
    pub fn hessian_over_density(&self, x: &[f64]) -> DMatrix<f64> {
        let (v, _) = self.whiten(x);
        linalg::symmetrize(&(&v * v.transpose() - &self.precision))
    }

    /// `∇∇p(x) = p(x)[Σ⁻¹(x−μ)(x−μ)ᵀΣ⁻¹ − Σ⁻¹]`
    pub fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        self.hessian_over_density(x) * self.density(x)
    }

    fn sample(&self, factor: &DMatrix<f64>, rng: &mut impl Rng) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.mean + factor * z
    }
}

/// One Gaussian per (fitted) class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerativeModelSet {
    models: Vec<GaussianModel>,
    regularizer: f64,
}

impl GenerativeModelSet {
    pub fn new(models: Vec<GaussianModel>, regularizer: f64) -> Result<Self> {
        let first = models.first().ok_or(Error::EmptyInput("generative models"))?;
        let d = first.dim();
        if let Some(m) = models.iter().find(|m| m.dim() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: m.dim(),
            });
        }
        Ok(Self { models, regularizer })
    }

    pub fn models(&self) -> &[GaussianModel] {
        &self.models
    }

    pub fn regularizer(&self) -> f64 {
        self.regularizer
    }

    pub fn dim(&self) -> usize {
        self.models[0].dim()
    }

    pub fn class_count(&self) -> usize {
        self.models.len()
    }

    /// Prior-weighted mixture log-density `ln Σ_c π_c p_c(x)`.
    pub fn mixture_log_density(&self, x: &[f64]) -> f64 {
        let logs: Vec<f64> = self
            .models
            .iter()
            .map(|m| m.prior.ln() + m.log_density(x))
            .collect();
        log_sum_exp(&logs)
    }
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn class_model(
    train: &LabeledDataset,
    members: &[usize],
    lambda_cov: f64,
    prior: f64,
    class: usize,
) -> Result<GaussianModel> {
    let d = train.dim();
    let x = train.features();
    let n = members.len() as f64;
    let mut mean = DVector::zeros(d);
    for &i in members {
        mean += x.row(i).transpose();
    }
    mean /= n;
    let mut cov = DMatrix::zeros(d, d);
    for &i in members {
        let diff = x.row(i).transpose() - &mean;
        cov += &diff * diff.transpose();
    }
    cov /= n;
    let trace = cov.trace();
    let ridge = if trace > 0.0 {
        lambda_cov * trace / d as f64
    } else {
        // a single distinct point: the regulariser is all that is left
        lambda_cov
    };
    for j in 0..d {
        cov[(j, j)] += ridge;
    }
    let mut model = GaussianModel::new(mean, cov, prior)
        .map_err(|_| Error::NotPositiveDefinite(format!("covariance of class {class}")))?;
    model.class = class;
    Ok(model)
}

/// Fits one Gaussian per class: sample mean, sample covariance (denominator
/// n_c) plus `λ·trace(Σ)/D·I`, prior `n_c / N`.
pub fn fit_gaussian_models(train: &LabeledDataset, lambda_cov: f64) -> Result<GenerativeModelSet> {
    if lambda_cov < 0.0 {
        return Err(Error::InvalidParameter("lambda_cov must be non-negative".into()));
    }
    let counts = train.class_counts();
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::EmptyClass(c));
    }
    let n = train.len() as f64;
    let mut members = vec![Vec::new(); train.class_count()];
    for (i, &l) in train.labels().iter().enumerate() {
        members[l].push(i);
    }
    let models = members
        .iter()
        .enumerate()
        .map(|(c, m)| class_model(train, m, lambda_cov, m.len() as f64 / n, c))
        .collect::<Result<Vec<_>>>()?;
    GenerativeModelSet::new(models, lambda_cov)
}

/// Like [`fit_gaussian_models`] but skips classes with fewer than
/// `min_members` points. Returns the fitted set and the skipped class ids.
pub fn fit_gaussian_models_lenient(
    train: &LabeledDataset,
    lambda_cov: f64,
    min_members: usize,
) -> Result<(GenerativeModelSet, Vec<usize>)> {
    let mut members = vec![Vec::new(); train.class_count()];
    for (i, &l) in train.labels().iter().enumerate() {
        members[l].push(i);
    }
    let kept: usize = members
        .iter()
        .filter(|m| m.len() >= min_members.max(1))
        .map(Vec::len)
        .sum();
    let mut models = Vec::new();
    let mut skipped = Vec::new();
    for (c, m) in members.iter().enumerate() {
        if m.len() < min_members.max(1) {
            skipped.push(c);
            continue;
        }
        models.push(class_model(train, m, lambda_cov, m.len() as f64 / kept as f64, c)?);
    }
    if !skipped.is_empty() {
        log::info!("skipping classes {skipped:?} with fewer than {min_members} members");
    }
    Ok((GenerativeModelSet::new(models, lambda_cov)?, skipped))
}

/// Bias matrix at one point, stored up to a positive factor.
#[derive(Debug, Clone)]
pub struct PhiMatrix {
    /// Φ / exp(log_scale)
    pub matrix: DMatrix<f64>,
    /// Natural log of the factor dropped from `matrix`.
    pub log_scale: f64,
    /// Every class density underflowed; `matrix` is zero.
    pub degenerate: bool,
}

impl PhiMatrix {
    /// Φ at its true scale (may overflow or underflow for extreme points).
    pub fn unscaled(&self) -> DMatrix<f64> {
        &self.matrix * self.log_scale.exp()
    }
}

/// Multiway bias matrix
/// `Φ = Σ_c ∇∇p_c(x)·(Σ_{c'≠c} p_{c'}² − p_c Σ_{c'≠c} p_{c'})`
/// with `p_c` the prior-weighted class density. The densities share a common
/// exp-shift, recorded in `log_scale`.
pub fn phi_matrix(x: &[f64], ms: &GenerativeModelSet) -> Result<PhiMatrix> {
    let d = ms.dim();
    if x.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: x.len(),
        });
    }
    if ms.class_count() < 2 {
        return Err(Error::InvalidParameter(
            "the bias matrix needs at least two classes".into(),
        ));
    }
    let parts: Vec<(f64, DVector<f64>)> = ms
        .models()
        .iter()
        .map(|m| {
            let (v, quad) = m.whiten(x);
            let lp = m.prior.ln() - 0.5 * (d as f64 * LN_2PI + m.log_det + quad);
            (lp, v)
        })
        .collect();
    let shift = parts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    if !(shift >= f64::MIN_POSITIVE.ln()) {
        return Ok(PhiMatrix {
            matrix: DMatrix::zeros(d, d),
            log_scale: 0.0,
            degenerate: true,
        });
    }
    let q: Vec<f64> = parts.iter().map(|p| (p.0 - shift).exp()).collect();

    let mut phi = DMatrix::zeros(d, d);
    for (c, ((_, v), model)) in parts.iter().zip(ms.models()).enumerate() {
        let qc = q[c];
        let (mut others, mut others_sq) = (0.0, 0.0);
        for (k, &qk) in q.iter().enumerate() {
            if k != c {
                others += qk;
                others_sq += qk * qk;
            }
        }
        let weight = others_sq - qc * others;
        let coeff = qc * weight;
        if coeff == 0.0 {
            continue;
        }
        phi.ger(coeff, v, v, 1.0);
        phi -= &model.precision * coeff;
    }
    Ok(PhiMatrix {
        matrix: linalg::symmetrize(&phi),
        log_scale: 3.0 * shift,
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub samples: usize,
}

/// Importance-sampling estimate of the asymptotic nearest-neighbour error
/// `∫ p₁p₂/(p₁+p₂) dx` for two equally likely classes, drawing from
/// `(p₁+p₂)/2`.
pub fn asymptotic_error_mc(ms: &GenerativeModelSet, samples: usize, seed: u64) -> Result<McEstimate> {
    if ms.class_count() != 2 {
        return Err(Error::NotBinary(ms.class_count()));
    }
    if samples < 2 {
        return Err(Error::InvalidParameter("need at least two samples".into()));
    }
    let models = ms.models();
    let factors: Vec<DMatrix<f64>> = models
        .iter()
        .map(|m| {
            m.covariance
                .clone()
                .cholesky()
                .map(|c| c.l())
                .ok_or_else(|| Error::NotPositiveDefinite("class covariance".into()))
        })
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..samples {
        let c = usize::from(rng.random::<bool>());
        let x = models[c].sample(&factors[c], &mut rng);
        let a = models[0].log_density(x.as_slice());
        let b = models[1].log_density(x.as_slice());
        // p1 p2 / ((p1 + p2) m) with m = (p1 + p2) / 2
        let w = 2.0 * (a + b - 2.0 * log_sum_exp(&[a, b])).exp();
        sum += w;
        sum_sq += w * w;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok(McEstimate {
        estimate: mean,
        std_error: (var / n).sqrt(),
        samples,
    })
}

/// Metric-dependent factor of the local bias for a binary problem:
/// `p₁p₂(p₂−p₁)/(p₁+p₂)² · Trace[M⁻¹(∇∇p₁/p₁ − ∇∇p₂/p₂)]`.
pub fn bias_integrand(x: &[f64], metric: &MetricMatrix, ms: &GenerativeModelSet) -> Result<f64> {
    if ms.class_count() != 2 {
        return Err(Error::NotBinary(ms.class_count()));
    }
    if metric.dim() != ms.dim() || x.len() != ms.dim() {
        return Err(Error::DimensionMismatch {
            expected: ms.dim(),
            found: metric.dim().min(x.len()),
        });
    }
    let [m1, m2] = [&ms.models()[0], &ms.models()[1]];
    let inv = metric
        .matrix()
        .clone()
        .cholesky()
        .ok_or(Error::SingularMetric)?
        .inverse();
    let phi = m1.hessian_over_density(x) - m2.hessian_over_density(x);
    let trace = inv.component_mul(&phi).sum();

    let a = m1.log_density(x);
    let b = m2.log_density(x);
    let top = a.max(b);
    let (e1, e2) = ((a - top).exp(), (b - top).exp());
    let prefactor = top.exp() * e1 * e2 * (e2 - e1) / ((e1 + e2) * (e1 + e2));
    Ok(prefactor * trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn standard(d: usize, mean: &[f64]) -> GaussianModel {
        GaussianModel::new(DVector::from_column_slice(mean), DMatrix::identity(d, d), 0.5).unwrap()
    }

    #[test]
    fn density_examples() {
        let m = standard(1, &[0.0]);
        assert!((m.density(&[0.0]) - 0.398_942_280_401_432_7).abs() < 1e-12);
        let m2 = standard(2, &[0.0, 0.0]);
        assert!((m2.density(&[0.0, 0.0]) - 1.0 / (2.0 * std::f64::consts::PI)).abs() < 1e-12);
        assert!((m.log_density(&[50.0]) + 1250.918_938_533_204_7).abs() < 1e-9);
        assert_eq!(m.density(&[50.0]), 0.0);
    }

    #[test]
    fn hessian_at_mean_and_inflection() {
        let m = standard(1, &[0.0]);
        let h = m.hessian(&[0.0]);
        assert!((h[(0, 0)] + m.density(&[0.0])).abs() < 1e-15);
        assert!(m.hessian(&[1.0])[(0, 0)].abs() < 1e-16);
    }

    #[test]
    fn two_point_covariance() {
        let ds = LabeledDataset::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0], vec![5.0, 5.0], vec![6.0, 7.0]], vec![0, 0, 1, 1], 2).unwrap();
        assert!(matches!(fit_gaussian_models(&ds, 0.0), Err(Error::NotPositiveDefinite(_))));
        let ms = fit_gaussian_models(&ds, 1e-3).unwrap();
        let m = &ms.models()[0];
        assert_eq!(m.mean().as_slice(), &[1.0, 0.0]);
        assert!((m.covariance()[(0, 0)] - 1.0005).abs() < 1e-12);
        assert!((m.covariance()[(1, 1)] - 0.0005).abs() < 1e-12);
        let (vals, _) = linalg::sym_eigen_desc(m.covariance());
        assert!(vals[1] > 0.0);
    }

    #[test]
    fn empty_class_is_an_error() {
        let ds = LabeledDataset::from_rows(&[vec![0.0], vec![1.0]], vec![0, 0], 2).unwrap();
        assert!(matches!(fit_gaussian_models(&ds, 1e-3), Err(Error::EmptyClass(1))));
    }

    #[test]
    fn lenient_fit_skips_small_classes() {
        let ds = LabeledDataset::from_rows(
            &[vec![0.0], vec![1.0], vec![0.5], vec![9.0]],
            vec![0, 0, 0, 1],
            2,
        )
        .unwrap();
        let (ms, skipped) = fit_gaussian_models_lenient(&ds, 1e-3, 2).unwrap();
        assert_eq!(skipped, vec![1]);
        assert_eq!(ms.class_count(), 1);
        assert!((ms.models()[0].prior() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn phi_vanishes_at_symmetric_midpoint() {
        let ms = GenerativeModelSet::new(vec![standard(1, &[-1.0]), standard(1, &[1.0])], 0.0).unwrap();
        let phi = phi_matrix(&[0.0], &ms).unwrap();
        assert_eq!(phi.matrix[(0, 0)], 0.0);
        let same = GenerativeModelSet::new(vec![standard(2, &[0.3, 0.1]), standard(2, &[0.3, 0.1])], 0.0).unwrap();
        assert!(linalg::max_abs(&phi_matrix(&[1.0, -2.0], &same).unwrap().matrix) == 0.0);
    }

    #[test]
    fn phi_degenerate_when_everything_underflows() {
        let ms = GenerativeModelSet::new(vec![standard(1, &[0.0]), standard(1, &[1.0])], 0.0).unwrap();
        let phi = phi_matrix(&[1e4], &ms).unwrap();
        assert!(phi.degenerate);
        assert_eq!(linalg::max_abs(&phi.matrix), 0.0);
    }

    #[test]
    fn phi_needs_two_classes() {
        let ms = GenerativeModelSet::new(vec![standard(1, &[0.0])], 0.0).unwrap();
        assert!(phi_matrix(&[0.0], &ms).is_err());
    }

    #[test]
    fn mc_identical_models_is_one_half() {
        let ms = GenerativeModelSet::new(vec![standard(2, &[0.0, 0.0]), standard(2, &[0.0, 0.0])], 0.0).unwrap();
        let est = asymptotic_error_mc(&ms, 1000, 3).unwrap();
        assert!((est.estimate - 0.5).abs() < 1e-12);
    }

    #[test]
    fn mc_far_apart_is_tiny() {
        let ms = GenerativeModelSet::new(vec![standard(1, &[0.0]), standard(1, &[100.0])], 0.0).unwrap();
        assert!(asymptotic_error_mc(&ms, 5000, 3).unwrap().estimate < 1e-6);
    }

    #[test]
    fn mc_rejects_multiway() {
        let ms = GenerativeModelSet::new(
            vec![standard(1, &[0.0]), standard(1, &[1.0]), standard(1, &[2.0])],
            0.0,
        )
        .unwrap();
        assert!(matches!(asymptotic_error_mc(&ms, 10, 0), Err(Error::NotBinary(3))));
    }

    #[test]
    fn bias_integrand_zero_at_midpoint() {
        let ms = GenerativeModelSet::new(vec![standard(2, &[-1.0, 0.0]), standard(2, &[1.0, 0.0])], 0.0).unwrap();
        let v = bias_integrand(&[0.0, 0.7], &MetricMatrix::identity(2), &ms).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn json_round_trip_recomputes_precision() {
        let ds = LabeledDataset::from_rows(
            &[vec![0.0, 1.0], vec![1.0, 0.5], vec![0.3, 0.2], vec![4.0, 4.0], vec![5.0, 3.0], vec![4.5, 5.5]],
            vec![0, 0, 0, 1, 1, 1],
            2,
        )
        .unwrap();
        let ms = fit_gaussian_models(&ds, 1e-3).unwrap();
        let text = serde_json::to_string(&ms).unwrap();
        let back: GenerativeModelSet = serde_json::from_str(&text).unwrap();
        for (a, b) in ms.models().iter().zip(back.models()) {
            assert!((a.precision() - b.precision()).abs().max() < 1e-12);
            assert_eq!(a.class(), b.class());
        }
    }
}
