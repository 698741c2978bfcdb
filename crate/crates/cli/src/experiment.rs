//! Runs every configured method on every seeded split.

use std::collections::BTreeMap;
use std::time::Instant;

use genmetric::classify::{tune_and_test, MethodSpec, TunedResult};
use genmetric::dataset::{prepare_split, LabeledDataset, Split};
use genmetric::generative::{fit_gaussian_models, GenerativeModelSet};
use genmetric::global_metric::{
    density_weighted_combination, uniform_combination, DensityEstimator, DensityWeightedConfig, EstimatorKind,
};
use genmetric::kernel_mkl::mkl_tune_and_test;
use genmetric::local_metric::{compute_all_local_metrics, regional_metrics, DEFAULT_EPS_REL};
use genmetric::unsupervised::{
    assign_to_centers, cluster_transfer_tune, isomap_embed, kmeans, rand_score, IterativeKmeansConfig,
};
use genmetric::MetricMatrix;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, Method};
use crate::error::CliError;
use crate::report::{DatasetSummary, MethodReport, Report, SplitValue, Timings};

type Phases = BTreeMap<String, f64>;

/// Result of one method on one split.
struct Outcome {
    value: Result<f64, String>,
    selected: Value,
    phases: Phases,
}

/// Generative models and metrics shared by the methods of one split.
struct Shared<'a> {
    train: &'a LabeledDataset,
    lambda_cov: f64,
    models: Option<GenerativeModelSet>,
    locals: Option<Vec<MetricMatrix>>,
    uni: Option<MetricMatrix>,
    phases: Phases,
}

fn timed<T>(phases: &mut Phases, name: &str, f: impl FnOnce() -> T) -> T {
    let start = Instant::now();
    let out = f();
    *phases.entry(name.to_string()).or_default() += start.elapsed().as_secs_f64();
    out
}

impl<'a> Shared<'a> {
    fn new(train: &'a LabeledDataset, lambda_cov: f64) -> Self {
        Self {
            train,
            lambda_cov,
            models: None,
            locals: None,
            uni: None,
            phases: Phases::new(),
        }
    }

    fn models(&mut self) -> genmetric::Result<&GenerativeModelSet> {
        if self.models.is_none() {
            let (train, lc) = (self.train, self.lambda_cov);
            self.models = Some(timed(&mut self.phases, "fit_models", || fit_gaussian_models(train, lc))?);
        }
        Ok(self.models.as_ref().expect("just set"))
    }

    fn locals(&mut self) -> genmetric::Result<&[MetricMatrix]> {
        if self.locals.is_none() {
            let ms = self.models()?.clone();
            let train = self.train;
            let locals = timed(&mut self.phases, "local_metrics", || {
                compute_all_local_metrics(train, &ms, DEFAULT_EPS_REL)
            })?;
            self.locals = Some(locals);
        }
        Ok(self.locals.as_deref().expect("just set"))
    }

    fn uni(&mut self) -> genmetric::Result<MetricMatrix> {
        if self.uni.is_none() {
            let locals = self.locals()?.to_vec();
            let uni = timed(&mut self.phases, "uniform_combination", || uniform_combination(&locals))?;
            self.uni = Some(uni);
        }
        Ok(self.uni.clone().expect("just set"))
    }
}

fn knn_selected(r: &TunedResult) -> Value {
    json!({
        "k": r.selected.k,
        "validation_error": r.validation_error,
    })
}

fn run_method(method: Method, split: &Split, shared: &mut Shared, cfg: &ExperimentConfig, seed: u64) -> Outcome {
    let mut phases = Phases::new();
    let result = run_method_inner(method, split, shared, cfg, seed, &mut phases);
    let (value, selected) = match result {
        Ok((v, s)) => (Ok(v), s),
        Err(e) => (Err(e.to_string()), Value::Null),
    };
    Outcome { value, selected, phases }
}

fn run_method_inner(
    method: Method,
    split: &Split,
    shared: &mut Shared,
    cfg: &ExperimentConfig,
    seed: u64,
    phases: &mut Phases,
) -> genmetric::Result<(f64, Value)> {
    let g = &cfg.grids;
    let (train, val, test) = (&split.train, &split.validation, &split.test);
    let knn = |metric: MetricMatrix, phases: &mut Phases| {
        let spec = MethodSpec::Knn {
            metric,
            k_grid: g.k.clone(),
        };
        timed(phases, "tune_and_test", || tune_and_test(&spec, train, val, test))
    };
    match method {
        Method::Euclidean => {
            let r = knn(MetricMatrix::identity(train.dim()), phases)?;
            Ok((r.test_error, knn_selected(&r)))
        }
        Method::MUni => {
            let r = knn(shared.uni()?, phases)?;
            Ok((r.test_error, knn_selected(&r)))
        }
        Method::GlmInt => {
            let spec = MethodSpec::GlmInt {
                models: shared.models()?.clone(),
                k_grid: g.k.clone(),
                lambda_grid: g.lambda_int.clone(),
                eps_rel: DEFAULT_EPS_REL,
            };
            let r = timed(phases, "tune_and_test", || tune_and_test(&spec, train, val, test))?;
            Ok((
                r.test_error,
                json!({"k": r.selected.k, "lambda_int": r.selected.lambda, "validation_error": r.validation_error}),
            ))
        }
        Method::MUniEnergy => {
            let spec = MethodSpec::Energy {
                metric: shared.uni()?,
                k_grid: g.k.clone(),
                beta_grid: g.beta.clone(),
            };
            let r = timed(phases, "tune_and_test", || tune_and_test(&spec, train, val, test))?;
            Ok((
                r.test_error,
                json!({"k": r.selected.k, "beta": r.selected.beta, "margin": r.selected.margin, "validation_error": r.validation_error}),
            ))
        }
        Method::MGmm | Method::MKde => {
            let estimator = if method == Method::MGmm {
                EstimatorKind::gmm()
            } else {
                EstimatorKind::kde()
            };
            let locals = shared.locals()?.to_vec();
            let mut dw = DensityWeightedConfig::new(estimator);
            dw.max_iter = g.density_max_iter;
            dw.lambda_cov = g.lambda_cov;
            dw.seed = seed;
            let combined = timed(phases, "combination", || density_weighted_combination(train, Some(val), &locals, &dw))?;
            let r = knn(combined.metric.clone(), phases)?;
            let mut sel = knn_selected(&r);
            sel["iterations"] = json!(combined.weights.len());
            if let Some(DensityEstimator::Kde { sigma }) = combined.estimators.last() {
                sel["kde_sigma"] = json!(sigma);
            }
            Ok((r.test_error, sel))
        }
        Method::MklBaseline | Method::MklMetric { .. } => {
            let metrics = match method {
                Method::MklMetric { regions } => {
                    let locals = shared.locals()?.to_vec();
                    timed(phases, "regional_metrics", || regional_metrics(&locals, train.features(), regions, seed))?.metrics
                }
                _ => vec![MetricMatrix::identity(train.dim())],
            };
            let r = timed(phases, "mkl", || {
                mkl_tune_and_test(train, val, test, &metrics, &g.tau, &g.c, g.mkl_tol, seed)
            })?;
            Ok((
                r.test_error,
                json!({"c": r.selected_c, "kernels": r.kernel_count, "validation_error": r.validation_error}),
            ))
        }
        Method::ClusterUni => {
            let grid: Vec<(f64, f64)> = g
                .cluster_lambda_cov
                .iter()
                .flat_map(|&c| g.cluster_lambda_int.iter().map(move |&i| (c, i)))
                .collect();
            let base = IterativeKmeansConfig::new(train.class_count(), seed);
            let tuned = timed(phases, "clustering", || cluster_transfer_tune(train, val, &grid, &base))?;
            let assigned = timed(phases, "testing", || {
                assign_to_centers(test.features(), &tuned.result.clustering.centers, &tuned.result.metric)
            })?;
            let rand = rand_score(&assigned, test.labels())?;
            Ok((
                rand,
                json!({"lambda_cov": tuned.best.lambda_cov, "lambda_int": tuned.best.lambda_int, "validation_rand": tuned.best.validation_rand}),
            ))
        }
        Method::ClusterEuclidean => {
            let identity = MetricMatrix::identity(train.dim());
            let res = timed(phases, "clustering", || kmeans(train.features(), train.class_count(), &identity, seed, 10))?;
            let assigned = timed(phases, "testing", || assign_to_centers(test.features(), &res.centers, &identity))?;
            Ok((rand_score(&assigned, test.labels())?, json!({"inertia": res.inertia})))
        }
        Method::Isomap => {
            let metric = shared.uni()?;
            let emb = timed(phases, "embedding", || {
                isomap_embed(train.features(), &metric, g.isomap_neighbors, g.isomap_dim)
            })?;
            Ok((
                emb.residual_variance,
                json!({"neighbors": emb.neighbor_count, "excluded": emb.excluded}),
            ))
        }
    }
}

struct RepeatResult {
    seed: u64,
    outcomes: Vec<Outcome>,
    shared_phases: Phases,
    split_error: Option<String>,
}

fn run_repeat(ds: &LabeledDataset, cfg: &ExperimentConfig, repeat: usize) -> RepeatResult {
    let spec = cfg.split.spec(repeat);
    let seed = spec.seed;
    let mut split_phases = Phases::new();
    let split = match timed(&mut split_phases, "split", || prepare_split(ds, &spec, &cfg.preprocess)) {
        Ok(s) => s,
        Err(e) => {
            return RepeatResult {
                seed,
                outcomes: Vec::new(),
                shared_phases: split_phases,
                split_error: Some(e.to_string()),
            }
        }
    };
    let mut shared = Shared::new(&split.train, cfg.grids.lambda_cov);
    let outcomes = cfg
        .methods
        .iter()
        .map(|&m| {
            let out = run_method(m, &split, &mut shared, cfg, seed);
            if let Err(e) = &out.value {
                log::warn!("{m} failed on split seed {seed}: {e}");
            }
            out
        })
        .collect();
    let mut shared_phases = shared.phases;
    shared_phases.extend(split_phases);
    RepeatResult {
        seed,
        outcomes,
        shared_phases,
        split_error: None,
    }
}

/// Runs the whole experiment. Repeats run in parallel on the current rayon
/// pool and are aggregated in repeat order.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    cfg.validate()?;
    let ds = cfg.load_dataset()?;
    let start = Instant::now();
    let repeats: Vec<RepeatResult> = (0..cfg.split.n_repeats)
        .into_par_iter()
        .map(|r| run_repeat(&ds, cfg, r))
        .collect();

    let mut timings = Timings::default();
    for rep in &repeats {
        for (k, v) in &rep.shared_phases {
            *timings.shared.entry(k.clone()).or_default() += v;
        }
    }
    let methods = cfg
        .methods
        .iter()
        .enumerate()
        .map(|(mi, &m)| {
            let mut phases = Phases::new();
            let per_split = repeats
                .iter()
                .enumerate()
                .map(|(r, rep)| match rep.outcomes.get(mi) {
                    Some(o) => {
                        for (k, v) in &o.phases {
                            *phases.entry(k.clone()).or_default() += v;
                        }
                        SplitValue {
                            repeat: r,
                            seed: rep.seed,
                            value: o.value.as_ref().ok().copied(),
                            selected: o.selected.clone(),
                            error: o.value.as_ref().err().cloned(),
                        }
                    }
                    None => SplitValue {
                        repeat: r,
                        seed: rep.seed,
                        value: None,
                        selected: Value::Null,
                        error: rep.split_error.clone(),
                    },
                })
                .collect();
            timings.methods.insert(m.to_string(), phases);
            MethodReport::from_splits(m.to_string(), m.measure(), per_split)
        })
        .collect();
    timings.total_seconds = start.elapsed().as_secs_f64();

    Ok(Report {
        version: crate::config::CONFIG_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        dataset: DatasetSummary {
            name: cfg.dataset_name(),
            points: ds.len(),
            features: ds.dim(),
            classes: ds.class_count(),
        },
        config: cfg.clone(),
        methods,
        timings,
    })
}
