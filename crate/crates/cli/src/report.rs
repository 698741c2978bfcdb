//! Aggregated results and their on-disk forms.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{ExperimentConfig, Measure};
use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub name: String,
    pub points: usize,
    pub features: usize,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitValue {
    pub repeat: usize,
    pub seed: u64,
    pub value: Option<f64>,
    pub selected: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub name: String,
    pub measure: Measure,
    /// Mean over the splits that succeeded.
    pub mean: Option<f64>,
    /// Sample standard deviation over √n, with n the number of successes.
    pub std_err: Option<f64>,
    pub failures: usize,
    pub per_split: Vec<SplitValue>,
}

impl MethodReport {
    pub fn from_splits(name: String, measure: Measure, per_split: Vec<SplitValue>) -> Self {
        let values: Vec<f64> = per_split.iter().filter_map(|s| s.value).collect();
        let (mean, std_err) = mean_and_stderr(&values);
        Self {
            name,
            measure,
            mean,
            std_err,
            failures: per_split.len() - values.len(),
            per_split,
        }
    }

    pub fn succeeded(&self) -> bool {
        self.mean.is_some()
    }
}

/// Mean and `s/√n`; a single value has zero standard error.
pub fn mean_and_stderr(values: &[f64]) -> (Option<f64>, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (None, None);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (Some(mean), Some(0.0));
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (Some(mean), Some((var / n as f64).sqrt()))
}

/// Wall-clock seconds summed over repeats.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub total_seconds: f64,
    /// Split preparation and the generative fits shared by several methods.
    pub shared: BTreeMap<String, f64>,
    pub methods: BTreeMap<String, BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub version: u32,
    pub tool_version: String,
    pub dataset: DatasetSummary,
    pub config: ExperimentConfig,
    pub methods: Vec<MethodReport>,
    pub timings: Timings,
}

fn scale(measure: Measure) -> (f64, usize, &'static str) {
    match measure {
        Measure::Error => (100.0, 2, "error %"),
        Measure::Rand => (1.0, 3, "rand"),
        Measure::ResidualVariance => (1.0, 4, "resid. var."),
    }
}

/// `mean ± stderr`, errors in percent.
pub fn format_value(measure: Measure, mean: f64, std_err: f64) -> String {
    let (s, digits, _) = scale(measure);
    format!("{:.*} ± {:.*}", digits, mean * s, digits, std_err * s)
}

impl Report {
    pub fn any_succeeded(&self) -> bool {
        self.methods.iter().any(MethodReport::succeeded)
    }

    pub fn table(&self) -> String {
        let d = &self.dataset;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{}: {} points, {} features, {} classes, {} repeats",
            d.name,
            d.points,
            d.features,
            d.classes,
            self.config.split.n_repeats
        );
        let width = self.methods.iter().map(|m| m.name.len()).max().unwrap_or(6).max(6);
        let _ = writeln!(out, "{:<width$}  {:<12}  {}", "method", "measure", "mean ± stderr");
        for m in &self.methods {
            let (_, _, label) = scale(m.measure);
            let cell = match (m.mean, m.std_err) {
                (Some(mean), Some(se)) => format_value(m.measure, mean, se),
                _ => "failed".to_string(),
            };
            let note = if m.failures > 0 && m.succeeded() {
                format!("  ({} failed splits)", m.failures)
            } else {
                String::new()
            };
            let _ = writeln!(out, "{:<width$}  {:<12}  {cell}{note}", m.name, label);
        }
        out
    }

    fn write_csv(&self, path: &Path) -> Result<(), CliError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["method", "measure", "repeat", "seed", "value", "error"])?;
        for m in &self.methods {
            let measure = serde_json::to_value(m.measure)?;
            for s in &m.per_split {
                w.write_record([
                    m.name.clone(),
                    measure.as_str().unwrap_or_default().to_string(),
                    s.repeat.to_string(),
                    s.seed.to_string(),
                    s.value.map(|v| v.to_string()).unwrap_or_default(),
                    s.error.clone().unwrap_or_default(),
                ])?;
            }
        }
        w.flush().map_err(|e| CliError::io(path, e))?;
        Ok(())
    }

    /// Writes `report.json`, `report.csv` and `table.txt` into `dir`.
    pub fn write_all(&self, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let json = dir.join("report.json");
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&json, text + "\n").map_err(|e| CliError::io(&json, e))?;
        let csv = dir.join("report.csv");
        self.write_csv(&csv)?;
        let table = dir.join("table.txt");
        std::fs::write(&table, self.table()).map_err(|e| CliError::io(&table, e))?;
        Ok(vec![json, csv, table])
    }
}
