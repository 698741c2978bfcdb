//! WebAssembly bindings for the browser demo in `www/`.

use genmetric::classify::{KnnClassifier, KnnConfig, Predictor, TieRule};
use genmetric::dataset::{make_synthetic_mixture, LabeledDataset, MixtureComponent};
use genmetric::generative::{fit_gaussian_models, GenerativeModelSet, DEFAULT_LAMBDA_COV};
use genmetric::global_metric::uniform_combination;
use genmetric::local_metric::{compute_all_local_metrics, local_metric_at, solve_local_metric, spectral_decomposition, DEFAULT_EPS_REL};
use genmetric::MetricMatrix;
use nalgebra::DMatrix;
use wasm_bindgen::prelude::*;

fn js(e: genmetric::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn flat2(m: &MetricMatrix) -> [f64; 3] {
    let a = m.matrix();
    [a[(0, 0)], a[(0, 1)], a[(1, 1)]]
}

/// `[m11, m12, m22, λ1, λ2, indefinite]` for the symmetric Φ `[[a, b], [b, c]]`.
pub fn phi_to_metric(a: f64, b: f64, c: f64) -> genmetric::Result<Vec<f64>> {
    let phi = DMatrix::from_row_slice(2, 2, &[a, b, b, c]);
    let s = spectral_decomposition(&phi, DEFAULT_EPS_REL)?;
    let m = solve_local_metric(&phi, DEFAULT_EPS_REL)?;
    let mut out = flat2(&m).to_vec();
    out.extend_from_slice(&s.eigenvalues);
    out.push(if s.is_indefinite() { 1.0 } else { 0.0 });
    Ok(out)
}

#[wasm_bindgen(js_name = solvePhi)]
pub fn solve_phi(a: f64, b: f64, c: f64) -> Result<Vec<f64>, JsError> {
    phi_to_metric(a, b, c).map_err(js)
}

/// Two labelled Gaussian classes in the plane with a shared covariance.
pub struct SceneCore {
    train: LabeledDataset,
    test: LabeledDataset,
    models: GenerativeModelSet,
    uni: MetricMatrix,
}

impl SceneCore {
    pub fn new(offset_x: f64, offset_y: f64, sx: f64, sy: f64, corr: f64, n: usize, seed: u64) -> genmetric::Result<Self> {
        let cov_xy = corr * sx * sy;
        let covariance = DMatrix::from_row_slice(2, 2, &[sx * sx, cov_xy, cov_xy, sy * sy]);
        let comps = vec![
            MixtureComponent {
                weight: 0.5,
                mean: vec![0.0, 0.0],
                covariance: covariance.clone(),
                class: 0,
            },
            MixtureComponent {
                weight: 0.5,
                mean: vec![offset_x, offset_y],
                covariance,
                class: 1,
            },
        ];
        let train = make_synthetic_mixture(&comps, n, seed)?;
        let test = make_synthetic_mixture(&comps, 2000, seed.wrapping_add(1))?;
        let models = fit_gaussian_models(&train, DEFAULT_LAMBDA_COV)?;
        let locals = compute_all_local_metrics(&train, &models, DEFAULT_EPS_REL)?;
        let uni = uniform_combination(&locals)?;
        Ok(SceneCore {
            train,
            test,
            models,
            uni,
        })
    }

    /// `x, y, label` per training point.
    pub fn points(&self) -> Vec<f64> {
        let f = self.train.features();
        (0..self.train.len())
            .flat_map(|i| [f[(i, 0)], f[(i, 1)], self.train.labels()[i] as f64])
            .collect()
    }

    pub fn uni_metric(&self) -> [f64; 3] {
        flat2(&self.uni)
    }

    /// `x, y, m11, m12, m22` on a `steps × steps` grid over the box.
    pub fn metric_field(&self, x0: f64, x1: f64, y0: f64, y1: f64, steps: usize) -> genmetric::Result<Vec<f64>> {
        let mut out = Vec::with_capacity(steps * steps * 5);
        for j in 0..steps {
            for i in 0..steps {
                let x = lerp(x0, x1, i, steps);
                let y = lerp(y0, y1, j, steps);
                let m = local_metric_at(&[x, y], &self.models, DEFAULT_EPS_REL)?;
                out.extend_from_slice(&[x, y]);
                out.extend_from_slice(&flat2(&m));
            }
        }
        Ok(out)
    }

    fn classifier(&self, k: usize, learned: bool) -> genmetric::Result<KnnClassifier> {
        let metric = if learned {
            self.uni.clone()
        } else {
            MetricMatrix::identity(2)
        };
        KnnClassifier::new(
            &self.train,
            &KnnConfig {
                k,
                metric,
                tie_rule: TieRule::default(),
            },
        )
    }

    /// Predicted class per pixel, row-major from `(x0, y0)`.
    #[allow(clippy::too_many_arguments)]
    pub fn decision_map(&self, x0: f64, x1: f64, y0: f64, y1: f64, width: usize, height: usize, k: usize, learned: bool) -> genmetric::Result<Vec<u8>> {
        let clf = self.classifier(k, learned)?;
        let mut out = Vec::with_capacity(width * height);
        for j in 0..height {
            for i in 0..width {
                let p = clf.predict(&[lerp(x0, x1, i, width), lerp(y0, y1, j, height)]);
                out.push(p as u8);
            }
        }
        Ok(out)
    }

    /// k-NN error on a fresh sample from the same classes.
    pub fn test_error(&self, k: usize, learned: bool) -> genmetric::Result<f64> {
        let clf = self.classifier(k, learned)?;
        let predicted = clf.predict_batch(self.test.features());
        let wrong = predicted.iter().zip(self.test.labels()).filter(|(p, l)| p != l).count();
        Ok(wrong as f64 / predicted.len() as f64)
    }
}

fn lerp(a: f64, b: f64, i: usize, n: usize) -> f64 {
    if n <= 1 {
        return (a + b) / 2.0;
    }
    a + (b - a) * i as f64 / (n - 1) as f64
}

#[wasm_bindgen]
pub struct Scene(SceneCore);

#[wasm_bindgen]
impl Scene {
    #[wasm_bindgen(constructor)]
    pub fn new(offset_x: f64, offset_y: f64, sx: f64, sy: f64, corr: f64, n: usize, seed: u32) -> Result<Scene, JsError> {
        SceneCore::new(offset_x, offset_y, sx, sy, corr, n, seed as u64).map(Scene).map_err(js)
    }

    pub fn points(&self) -> Vec<f64> {
        self.0.points()
    }

    #[wasm_bindgen(js_name = uniMetric)]
    pub fn uni_metric(&self) -> Vec<f64> {
        self.0.uni_metric().to_vec()
    }

    #[wasm_bindgen(js_name = metricField)]
    pub fn metric_field(&self, x0: f64, x1: f64, y0: f64, y1: f64, steps: usize) -> Result<Vec<f64>, JsError> {
        self.0.metric_field(x0, x1, y0, y1, steps).map_err(js)
    }

    #[wasm_bindgen(js_name = decisionMap)]
    #[allow(clippy::too_many_arguments)]
    pub fn decision_map(&self, x0: f64, x1: f64, y0: f64, y1: f64, width: usize, height: usize, k: usize, learned: bool) -> Result<Vec<u8>, JsError> {
        self.0.decision_map(x0, x1, y0, y1, width, height, k, learned).map_err(js)
    }

    #[wasm_bindgen(js_name = testError)]
    pub fn test_error(&self, k: usize, learned: bool) -> Result<f64, JsError> {
        self.0.test_error(k, learned).map_err(js)
    }
}
