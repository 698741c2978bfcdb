#![allow(dead_code)]

use std::path::PathBuf;

use genmetric::classify::{tune_and_test, MethodSpec, TunedResult, DEFAULT_K_GRID};
use genmetric::dataset::{load_csv, CsvOptions, LabeledDataset, MixtureComponent, Split};
use genmetric::generative::{fit_gaussian_models, GaussianModel, GenerativeModelSet, DEFAULT_LAMBDA_COV};
use genmetric::global_metric::uniform_combination;
use genmetric::local_metric::{compute_all_local_metrics, DEFAULT_EPS_REL};
use genmetric::MetricMatrix;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn data(name: &str) -> LabeledDataset {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data").join(name);
    load_csv(path, &CsvOptions::default()).expect("bundled dataset loads")
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

pub fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    gaussian_matrix(rng, d, d).qr().q()
}

/// `A Aᵀ/d + floor·I`.
pub fn random_spd(rng: &mut ChaCha8Rng, d: usize, floor: f64) -> DMatrix<f64> {
    let a = gaussian_matrix(rng, d, d);
    let m = &a * a.transpose() / d as f64 + DMatrix::identity(d, d) * floor;
    (&m + m.transpose()) * 0.5
}

/// Random PSD metric, possibly rank deficient when `rank < d`.
pub fn random_metric(rng: &mut ChaCha8Rng, d: usize, rank: usize) -> MetricMatrix {
    let a = gaussian_matrix(rng, d, rank);
    let m = &a * a.transpose();
    MetricMatrix::new((&m + m.transpose()) * 0.5, genmetric::Provenance::Euclidean).unwrap()
}

pub fn random_models(rng: &mut ChaCha8Rng, d: usize, c: usize) -> GenerativeModelSet {
    let models = (0..c)
        .map(|k| {
            let mean = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal) * 1.5);
            let cov = random_spd(rng, d, 0.3);
            GaussianModel::new(mean, cov, 1.0 / c as f64).unwrap().with_class(k)
        })
        .collect();
    GenerativeModelSet::new(models, 0.0).unwrap()
}

/// Classes with random means and covariances.
pub fn random_mixture(rng: &mut ChaCha8Rng, d: usize, c: usize, spread: f64) -> Vec<MixtureComponent> {
    (0..c)
        .map(|k| MixtureComponent {
            weight: 1.0 / c as f64,
            mean: (0..d).map(|_| rng.sample::<f64, _>(StandardNormal) * spread).collect(),
            covariance: random_spd(rng, d, 0.2),
            class: k,
        })
        .collect()
}

pub fn uni_metric(train: &LabeledDataset) -> MetricMatrix {
    let ms = fit_gaussian_models(train, DEFAULT_LAMBDA_COV).unwrap();
    let locals = compute_all_local_metrics(train, &ms, DEFAULT_EPS_REL).unwrap();
    uniform_combination(&locals).unwrap()
}

pub fn knn_result(split: &Split, metric: MetricMatrix) -> TunedResult {
    let spec = MethodSpec::Knn {
        metric,
        k_grid: DEFAULT_K_GRID.to_vec(),
    };
    tune_and_test(&spec, &split.train, &split.validation, &split.test).unwrap()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn std_err(v: &[f64]) -> f64 {
    let m = mean(v);
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() as f64 - 1.0);
    (var / v.len() as f64).sqrt()
}

/// Average ranks (1-based), ties sharing the mean rank.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for t in i..=j {
            out[idx[t]] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman correlation via Pearson on average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let (ma, mb) = (mean(&ra), mean(&rb));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// Adaptive Simpson quadrature.
pub fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    fn rec<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let (fa, fb) = (f(a), f(b));
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(f, a, b, fa, fm, fb, whole, tol, 50)
}

/// Every labeling of `n` points up to renaming (restricted growth strings).
pub fn set_partitions(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = vec![0usize; n];
    fn go(i: usize, max: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if i == cur.len() {
            out.push(cur.clone());
            return;
        }
        for v in 0..=max + 1 {
            cur[i] = v;
            go(i + 1, max.max(v), cur, out);
        }
    }
    if n == 0 {
        return out;
    }
    go(1, 0, &mut cur, &mut out);
    out
}

/// Pair-counting Rand index.
pub fn rand_brute(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    let mut agree = 0usize;
    let mut total = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            total += 1;
            if (a[i] == a[j]) == (b[i] == b[j]) {
                agree += 1;
            }
        }
    }
    agree as f64 / total as f64
}
