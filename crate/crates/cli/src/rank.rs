//! Average ranks of methods across datasets.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Measure;
use crate::error::CliError;

/// The parts of a report that ranking needs.
#[derive(Debug, Clone, Deserialize)]
pub struct RankInput {
    pub dataset: RankDataset,
    pub methods: Vec<RankMethod>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct RankDataset {
    pub name: String,
}

#[derive(Debug, Clone, Deserialize)]
pub struct RankMethod {
    pub name: String,
    pub measure: Measure,
    pub mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRank {
    pub method: String,
    pub measure: Measure,
    pub average_rank: f64,
    /// `(dataset, rank)` for every dataset where the method has a result.
    pub per_dataset: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    pub datasets: Vec<String>,
    pub ranks: Vec<MethodRank>,
}

pub fn load_rank_input(path: &Path) -> Result<RankInput, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// 1-based ranks of `values` (best first); ties share the mean of the
/// ranks they span.
pub fn average_ranks(values: &[f64], lower_is_better: bool) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        let o = values[a].total_cmp(&values[b]);
        if lower_is_better {
            o
        } else {
            o.reverse()
        }
    });
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &t in &idx[i..=j] {
            ranks[t] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Ranks methods within each dataset and measure, then averages per method
/// over the datasets where it appears. Failed methods are left out.
pub fn rank_reports(inputs: &[RankInput]) -> RankTable {
    let mut acc: BTreeMap<(String, Measure), Vec<(String, f64)>> = BTreeMap::new();
    let mut order: Vec<(String, Measure)> = Vec::new();
    for input in inputs {
        let mut by_measure: BTreeMap<Measure, Vec<(&str, f64)>> = BTreeMap::new();
        for m in &input.methods {
            if let Some(v) = m.mean {
                by_measure.entry(m.measure).or_default().push((&m.name, v));
            }
        }
        for (measure, entries) in by_measure {
            let values: Vec<f64> = entries.iter().map(|e| e.1).collect();
            for ((name, _), r) in entries.iter().zip(average_ranks(&values, measure.lower_is_better())) {
                let key = (name.to_string(), measure);
                if !acc.contains_key(&key) {
                    order.push(key.clone());
                }
                acc.entry(key).or_default().push((input.dataset.name.clone(), r));
            }
        }
    }
    let ranks = order
        .into_iter()
        .map(|key| {
            let per_dataset = acc.remove(&key).unwrap_or_default();
            let average_rank = per_dataset.iter().map(|p| p.1).sum::<f64>() / per_dataset.len() as f64;
            MethodRank {
                method: key.0,
                measure: key.1,
                average_rank,
                per_dataset,
            }
        })
        .collect();
    RankTable {
        datasets: inputs.iter().map(|i| i.dataset.name.clone()).collect(),
        ranks,
    }
}

impl RankTable {
    pub fn render(&self) -> String {
        let width = self.ranks.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
        let mut out = format!("{:<width$}  {:>9}  datasets\n", "method", "avg. rank");
        for r in &self.ranks {
            out += &format!("{:<width$}  {:>9.2}  {}\n", r.method, r.average_rank, r.per_dataset.len());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_share_the_mean_rank() {
        assert_eq!(average_ranks(&[0.1, 0.3, 0.1, 0.2], true), vec![1.5, 4.0, 1.5, 3.0]);
        assert_eq!(average_ranks(&[0.9, 0.5], false), vec![1.0, 2.0]);
    }
}
