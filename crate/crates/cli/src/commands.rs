//! Subcommand implementations.

use std::io::Write;
use std::path::{Path, PathBuf};

use genmetric::classify::{KnnClassifier, KnnConfig, Predictor, TieRule};
use genmetric::dataset::{load_csv, CsvOptions, LabelColumn, LabeledDataset, Preprocess, ScaleParams};
use genmetric::generative::fit_gaussian_models;
use genmetric::global_metric::{density_weighted_combination, uniform_combination, DensityWeightedConfig, EstimatorKind};
use genmetric::local_metric::{compute_all_local_metrics, DEFAULT_EPS_REL};
use genmetric::unsupervised::{
    isomap_embed, iterative_metric_kmeans, kmeans, rand_score, write_points_csv, IterativeKmeansConfig,
};
use genmetric::MetricMatrix;
use serde::{Deserialize, Serialize};

use crate::config::{DatasetSource, ExperimentConfig, Grids, Method, SplitConfig, CONFIG_VERSION};
use crate::error::CliError;
use crate::experiment::run_experiment;
use crate::rank::{load_rank_input, rank_reports};
use crate::{Command, DataArgs, FitMethod, GlobalArgs, MetricChoice};

pub const METRIC_FILE_VERSION: u32 = 1;

/// What `fit-metric` writes and `classify` reads.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricArtifact {
    pub version: u32,
    pub method: String,
    /// Feature scaling fitted on the training file, if requested.
    pub scale: Option<ScaleParams>,
    pub metric: MetricMatrix,
    pub training_points: usize,
}

fn csv_options(label_column: &LabelColumn, no_header: bool) -> CsvOptions {
    CsvOptions::new(!no_header, label_column.clone())
}

/// Loads the data and, with `--scale`, rescales it with its own ranges.
fn load_data(args: &DataArgs) -> Result<(LabeledDataset, Option<ScaleParams>), CliError> {
    let ds = load_csv(&args.data, &csv_options(&args.label_column, args.no_header))?;
    if args.scale {
        let params = ScaleParams::fit(ds.features());
        let scaled = params.apply(&ds)?;
        Ok((scaled, Some(params)))
    } else {
        Ok((ds, None))
    }
}

fn writer_for(out: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
            }
            let f = std::fs::File::create(p).map_err(|e| CliError::io(p, e))?;
            Ok(Box::new(std::io::BufWriter::new(f)))
        }
        None => Ok(Box::new(std::io::stdout().lock())),
    }
}

fn uni_metric(ds: &LabeledDataset, lambda_cov: f64) -> Result<MetricMatrix, CliError> {
    let ms = fit_gaussian_models(ds, lambda_cov)?;
    let locals = compute_all_local_metrics(ds, &ms, DEFAULT_EPS_REL)?;
    Ok(uniform_combination(&locals)?)
}

/// Global metric of `method` learned from all of `ds`.
pub fn fit_metric(ds: &LabeledDataset, method: FitMethod, lambda_cov: f64, seed: u64) -> Result<MetricMatrix, CliError> {
    match method {
        FitMethod::Euclidean => Ok(MetricMatrix::identity(ds.dim())),
        FitMethod::MUni => uni_metric(ds, lambda_cov),
        FitMethod::MKde | FitMethod::MGmm => {
            let ms = fit_gaussian_models(ds, lambda_cov)?;
            let locals = compute_all_local_metrics(ds, &ms, DEFAULT_EPS_REL)?;
            let estimator = if method == FitMethod::MKde {
                EstimatorKind::kde()
            } else {
                EstimatorKind::gmm()
            };
            let mut cfg = DensityWeightedConfig::new(estimator);
            cfg.lambda_cov = lambda_cov;
            cfg.seed = seed;
            Ok(density_weighted_combination(ds, None, &locals, &cfg)?.metric)
        }
    }
}

fn method_name(m: FitMethod) -> &'static str {
    match m {
        FitMethod::Euclidean => "euclidean",
        FitMethod::MUni => "m_uni",
        FitMethod::MKde => "m_kde",
        FitMethod::MGmm => "m_gmm",
    }
}

fn write_json<T: Serialize>(value: &T, out: &Path) -> Result<(), CliError> {
    let mut w = writer_for(Some(out))?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| CliError::io(out, e))
}

pub fn dispatch(global: &GlobalArgs, command: Command) -> Result<(), CliError> {
    let seed = global.seed.unwrap_or(0);
    let out = global.out.as_deref();
    match command {
        Command::FitMetric {
            data,
            method,
            lambda_cov,
        } => {
            let (ds, scale) = load_data(&data)?;
            let metric = fit_metric(&ds, method, lambda_cov, seed)?;
            let artifact = MetricArtifact {
                version: METRIC_FILE_VERSION,
                method: method_name(method).into(),
                scale,
                metric,
                training_points: ds.len(),
            };
            let path = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("metric.json"));
            write_json(&artifact, &path)?;
            eprintln!("wrote {}", path.display());
            Ok(())
        }
        Command::Classify {
            metric,
            train,
            data,
            k,
            label_column,
            no_header,
        } => {
            let text = std::fs::read_to_string(&metric).map_err(|e| CliError::io(&metric, e))?;
            let artifact: MetricArtifact = serde_json::from_str(&text)?;
            if artifact.version != METRIC_FILE_VERSION {
                return Err(CliError::Config(format!("unsupported metric file version {}", artifact.version)));
            }
            let opts = csv_options(&label_column, no_header);
            let mut train_ds = load_csv(&train, &opts)?;
            let mut query = load_csv(data.as_ref().unwrap_or(&train), &opts)?;
            if let Some(scale) = &artifact.scale {
                train_ds = scale.apply(&train_ds)?;
                query = scale.apply(&query)?;
            }
            let clf = KnnClassifier::new(
                &train_ds,
                &KnnConfig {
                    k,
                    metric: artifact.metric,
                    tie_rule: TieRule::default(),
                },
            )?;
            let predicted = clf.predict_batch(query.features());
            let names = train_ds.class_values();
            let truth = query.class_values();
            let mut w = writer_for(out)?;
            let mut csv = csv::Writer::from_writer(&mut w);
            csv.write_record(["id", "predicted", "label"])?;
            let mut wrong = 0usize;
            for (i, &p) in predicted.iter().enumerate() {
                let actual = &truth[query.labels()[i]];
                wrong += usize::from(&names[p] != actual);
                csv.write_record([i.to_string(), names[p].clone(), actual.clone()])?;
            }
            csv.flush().map_err(|e| CliError::io("predictions", e))?;
            drop(csv);
            w.flush().map_err(|e| CliError::io("predictions", e))?;
            eprintln!("error rate against file labels: {:.4}", wrong as f64 / predicted.len() as f64);
            Ok(())
        }
        Command::Benchmark { config, repeats } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = global.seed {
                cfg.split.base_seed = s;
            }
            if let Some(r) = repeats {
                cfg.split.n_repeats = r;
            }
            if let Some(o) = out {
                cfg.output_dir = Some(o.to_path_buf());
            }
            run_and_write(cfg, "genmetric-out")
        }
        Command::Mkl { data, regions, repeats } => {
            let cfg = ExperimentConfig {
                version: CONFIG_VERSION,
                name: None,
                dataset: DatasetSource::Csv {
                    path: data.data.clone(),
                    has_header: !data.no_header,
                    label_column: Some(data.label_column.clone()),
                },
                preprocess: Preprocess {
                    scale: data.scale,
                    pca_dim: None,
                },
                methods: vec![Method::MklBaseline, Method::MklMetric { regions }],
                split: SplitConfig {
                    n_repeats: repeats,
                    base_seed: seed,
                    ..SplitConfig::default()
                },
                grids: Grids::default(),
                output_dir: out.map(Path::to_path_buf),
            };
            run_and_write(cfg, "genmetric-mkl")
        }
        Command::Cluster {
            data,
            k,
            metric,
            lambda_cov,
            lambda_int,
        } => {
            let (ds, _) = load_data(&data)?;
            let k = k.unwrap_or(ds.class_count());
            let (assignments, learned) = match metric {
                MetricChoice::Euclidean => {
                    let identity = MetricMatrix::identity(ds.dim());
                    (kmeans(ds.features(), k, &identity, seed, 10)?.assignments, identity)
                }
                MetricChoice::MUni => {
                    let cfg = IterativeKmeansConfig {
                        lambda_cov,
                        lambda_int,
                        ..IterativeKmeansConfig::new(k, seed)
                    };
                    let res = iterative_metric_kmeans(ds.features(), &cfg)?;
                    (res.clustering.assignments, res.metric)
                }
            };
            let ids: Vec<usize> = (0..ds.len()).collect();
            let mut w = writer_for(out)?;
            write_points_csv(&mut w, &ids, ds.features(), Some(&assignments))?;
            w.flush().map_err(|e| CliError::io("assignments", e))?;
            eprintln!("rand index against file labels: {:.4}", rand_score(&assignments, ds.labels())?);
            log::info!("metric: {:?}", learned.matrix());
            Ok(())
        }
        Command::Embed {
            data,
            neighbors,
            dim,
            metric,
        } => {
            let (ds, _) = load_data(&data)?;
            let m = match metric {
                MetricChoice::Euclidean => MetricMatrix::identity(ds.dim()),
                MetricChoice::MUni => uni_metric(&ds, genmetric::generative::DEFAULT_LAMBDA_COV)?,
            };
            let emb = isomap_embed(ds.features(), &m, neighbors, dim)?;
            let labels: Vec<usize> = emb.indices.iter().map(|&i| ds.labels()[i]).collect();
            let mut w = writer_for(out)?;
            write_points_csv(&mut w, &emb.indices, &emb.coordinates, Some(&labels))?;
            w.flush().map_err(|e| CliError::io("embedding", e))?;
            eprintln!(
                "residual variance {:.6}; {} points outside the largest component",
                emb.residual_variance, emb.excluded
            );
            Ok(())
        }
        Command::Rank { reports } => {
            let inputs = reports.iter().map(|p| load_rank_input(p)).collect::<Result<Vec<_>, _>>()?;
            let table = rank_reports(&inputs);
            print!("{}", table.render());
            if let Some(o) = out {
                write_json(&table, o)?;
            }
            Ok(())
        }
    }
}

fn run_and_write(cfg: ExperimentConfig, default_dir: &str) -> Result<(), CliError> {
    let dir = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from(default_dir));
    let report = run_experiment(&cfg)?;
    let files = report.write_all(&dir)?;
    print!("{}", report.table());
    for f in files {
        eprintln!("wrote {}", f.display());
    }
    if report.any_succeeded() {
        Ok(())
    } else {
        Err(CliError::AllFailed)
    }
}
