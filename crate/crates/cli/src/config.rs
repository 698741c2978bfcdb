//! Versioned experiment configuration.

use std::fmt;
use std::path::{Path, PathBuf};

use genmetric::classify::{DEFAULT_BETA_GRID, DEFAULT_K_GRID, DEFAULT_LAMBDA_GRID};
use genmetric::dataset::{
    load_csv, make_synthetic_mixture, three_normal_preset, CsvOptions, LabelColumn, LabeledDataset, Preprocess,
    SplitSpec, THREE_NORMAL_SIZE,
};
use genmetric::generative::DEFAULT_LAMBDA_COV;
use genmetric::global_metric::DEFAULT_MAX_ITER;
use genmetric::kernel_mkl::{default_tau_grid, DEFAULT_C_GRID};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub dataset: DatasetSource,
    #[serde(default)]
    pub preprocess: Preprocess,
    pub methods: Vec<Method>,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub grids: Grids,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Relative paths are resolved against the configuration file.
    Csv {
        path: PathBuf,
        #[serde(default = "yes")]
        has_header: bool,
        /// Column index, header name, or `null` for the last column.
        #[serde(default)]
        label_column: Option<LabelColumn>,
    },
    Preset {
        name: Preset,
        #[serde(default)]
        size: Option<usize>,
        #[serde(default)]
        seed: u64,
    },
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    ThreeNormal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Method {
    Euclidean,
    GlmInt,
    MUni,
    MUniEnergy,
    MGmm,
    MKde,
    MklBaseline,
    MklMetric { regions: usize },
    ClusterUni,
    ClusterEuclidean,
    Isomap,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Euclidean => f.write_str("euclidean"),
            Method::GlmInt => f.write_str("glm_int"),
            Method::MUni => f.write_str("m_uni"),
            Method::MUniEnergy => f.write_str("m_uni_energy"),
            Method::MGmm => f.write_str("m_gmm"),
            Method::MKde => f.write_str("m_kde"),
            Method::MklBaseline => f.write_str("mkl_baseline"),
            Method::MklMetric { regions } => write!(f, "mkl_metric({regions})"),
            Method::ClusterUni => f.write_str("cluster_uni"),
            Method::ClusterEuclidean => f.write_str("cluster_euclidean"),
            Method::Isomap => f.write_str("isomap"),
        }
    }
}

/// What a method's per-split value measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    /// Test misclassification rate; lower is better.
    Error,
    /// Rand index of test assignments; higher is better.
    Rand,
    /// Isomap residual variance; lower is better.
    ResidualVariance,
}

impl Measure {
    pub fn lower_is_better(self) -> bool {
        !matches!(self, Measure::Rand)
    }
}

impl Method {
    pub fn measure(self) -> Measure {
        match self {
            Method::ClusterUni | Method::ClusterEuclidean => Measure::Rand,
            Method::Isomap => Measure::ResidualVariance,
            _ => Measure::Error,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    #[serde(default = "default_ratios")]
    pub ratios: [f64; 3],
    #[serde(default = "default_repeats")]
    pub n_repeats: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub stratified: bool,
}

fn default_ratios() -> [f64; 3] {
    [0.6, 0.2, 0.2]
}

fn default_repeats() -> usize {
    30
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            ratios: default_ratios(),
            n_repeats: default_repeats(),
            base_seed: 0,
            stratified: false,
        }
    }
}

impl SplitConfig {
    pub fn spec(&self, repeat: usize) -> SplitSpec {
        SplitSpec {
            ratios: self.ratios,
            seed: self.base_seed.wrapping_add(repeat as u64),
            stratified: self.stratified,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Grids {
    pub k: Vec<usize>,
    pub lambda_int: Vec<f64>,
    pub beta: Vec<f64>,
    pub c: Vec<f64>,
    pub tau: Vec<f64>,
    pub lambda_cov: f64,
    pub density_max_iter: usize,
    pub mkl_tol: f64,
    pub cluster_lambda_cov: Vec<f64>,
    pub cluster_lambda_int: Vec<f64>,
    pub isomap_neighbors: usize,
    pub isomap_dim: usize,
}

impl Default for Grids {
    fn default() -> Self {
        Self {
            k: DEFAULT_K_GRID.to_vec(),
            lambda_int: DEFAULT_LAMBDA_GRID.to_vec(),
            beta: DEFAULT_BETA_GRID.to_vec(),
            c: DEFAULT_C_GRID.to_vec(),
            tau: default_tau_grid(),
            lambda_cov: DEFAULT_LAMBDA_COV,
            density_max_iter: DEFAULT_MAX_ITER,
            mkl_tol: 1e-3,
            cluster_lambda_cov: vec![1e-3, 1e-2, 1e-1],
            cluster_lambda_int: vec![0.0, 0.25, 0.5, 0.75],
            isomap_neighbors: 7,
            isomap_dim: 2,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let DatasetSource::Csv { path: data, .. } = &mut cfg.dataset {
            if data.is_relative() {
                if let Some(dir) = path.parent() {
                    *data = dir.join(&*data);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.version != CONFIG_VERSION {
            return bad(format!("unsupported config version {} (expected {CONFIG_VERSION})", self.version));
        }
        if self.methods.is_empty() {
            return bad("methods list is empty".into());
        }
        if self.split.n_repeats == 0 {
            return bad("n_repeats must be at least 1".into());
        }
        SplitSpec::new(self.split.ratios, 0, self.split.stratified).map_err(|e| CliError::Config(e.to_string()))?;
        let g = &self.grids;
        if g.k.is_empty() || g.k.contains(&0) {
            return bad("k grid must be non-empty and positive".into());
        }
        if g.lambda_int.is_empty() || g.lambda_int.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return bad("lambda_int grid must be non-empty with values in [0, 1]".into());
        }
        if g.beta.is_empty() || g.c.is_empty() || g.tau.is_empty() {
            return bad("beta, c and tau grids must be non-empty".into());
        }
        if g.c.iter().chain(&g.tau).any(|v| !(*v > 0.0)) {
            return bad("c and tau values must be positive".into());
        }
        if !(g.lambda_cov >= 0.0) || !(g.mkl_tol > 0.0) {
            return bad("lambda_cov must be non-negative and mkl_tol positive".into());
        }
        if g.density_max_iter == 0 {
            return bad("density_max_iter must be at least 1".into());
        }
        if g.cluster_lambda_cov.is_empty() || g.cluster_lambda_int.is_empty() {
            return bad("clustering grids must be non-empty".into());
        }
        if g.isomap_neighbors == 0 || g.isomap_dim == 0 {
            return bad("isomap_neighbors and isomap_dim must be positive".into());
        }
        for m in &self.methods {
            if let Method::MklMetric { regions: 0 } = m {
                return bad("mkl_metric needs at least one region".into());
            }
        }
        let mut names: Vec<String> = self.methods.iter().map(ToString::to_string).collect();
        names.sort();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("methods list contains duplicates".into());
        }
        Ok(())
    }

    pub fn dataset_name(&self) -> String {
        if let Some(name) = &self.name {
            return name.clone();
        }
        match &self.dataset {
            DatasetSource::Csv { path, .. } => path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".into()),
            DatasetSource::Preset { name: Preset::ThreeNormal, .. } => "three_normal".into(),
        }
    }

    pub fn load_dataset(&self) -> Result<LabeledDataset, CliError> {
        match &self.dataset {
            DatasetSource::Csv {
                path,
                has_header,
                label_column,
            } => {
                let opts = CsvOptions::new(*has_header, label_column.clone().unwrap_or(LabelColumn::Last));
                load_csv(path, &opts).map_err(|e| CliError::Config(format!("dataset: {e}")))
            }
            DatasetSource::Preset {
                name: Preset::ThreeNormal,
                size,
                seed,
            } => make_synthetic_mixture(&three_normal_preset(), size.unwrap_or(THREE_NORMAL_SIZE), *seed)
                .map_err(|e| CliError::Config(format!("dataset: {e}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = ExperimentConfig::from_json(
            r#"{"version": 1, "dataset": {"preset": {"name": "three_normal"}}, "methods": ["euclidean", {"mkl_metric": {"regions": 3}}]}"#,
        )
        .unwrap();
        assert_eq!(cfg.split.n_repeats, 30);
        assert_eq!(cfg.methods[1], Method::MklMetric { regions: 3 });
        assert_eq!(cfg.methods[1].to_string(), "mkl_metric(3)");
        assert_eq!(cfg.grids.k, DEFAULT_K_GRID.to_vec());
    }

    #[test]
    fn rejects_unknown_keys_and_methods() {
        let base = r#"{"version": 1, "dataset": {"preset": {"name": "three_normal"}}, "methods": ["euclidean"]"#;
        assert!(ExperimentConfig::from_json(&format!("{base}}}")).is_ok());
        assert!(ExperimentConfig::from_json(&format!("{base}, \"extra\": 1}}")).is_err());
        let bad_method = r#"{"version": 1, "dataset": {"preset": {"name": "three_normal"}}, "methods": ["lmnn"]}"#;
        assert!(ExperimentConfig::from_json(bad_method).is_err());
        let zero = r#"{"version": 1, "dataset": {"preset": {"name": "three_normal"}}, "methods": ["euclidean"], "split": {"n_repeats": 0}}"#;
        assert!(ExperimentConfig::from_json(zero).is_err());
        let version = r#"{"version": 2, "dataset": {"preset": {"name": "three_normal"}}, "methods": ["euclidean"]}"#;
        assert!(ExperimentConfig::from_json(version).is_err());
    }
}
