//! Ranking metrics at a cutoff, Table-style relative improvements and the
//! Welch two-sample analysis.

mod report;
mod welch;

pub use report::{
    compare_models, evaluate_scorer, format_comparison_table, ComparisonRow, ListMetrics, Metric, MetricReport,
    ModelMetrics, RandomScorer, Scorer, TableColumn,
};
pub use welch::{welch_t_test, welch_t_test_at, TTestResult};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LabelVector;

pub const DEFAULT_CUTOFF: usize = 15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub cutoff: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { cutoff: DEFAULT_CUTOFF }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cutoff == 0 {
            return Err(Error::config("eval.cutoff", "must be >= 1"));
        }
        Ok(())
    }
}

/// Indices ordered by descending score; equal scores keep list order.
pub fn rank_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 1) as f64).log2()
}

/// NDCG@k for arbitrary non-negative gains; `None` when every gain is 0.
pub fn ndcg_with_gains(scores: &[f64], gains: &[f64], k: usize) -> Option<f64> {
    let order = rank_order(scores);
    let dcg: f64 = order.iter().take(k).enumerate().map(|(r, &i)| gains[i] * discount(r + 1)).sum();
    let mut ideal: Vec<f64> = gains.to_vec();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg: f64 = ideal.iter().take(k).enumerate().map(|(r, g)| g * discount(r + 1)).sum();
    (idcg > 0.0).then(|| dcg / idcg)
}

/// Binary-gain NDCG@k. Lists without positives have no defined value and
/// return `None` so callers can exclude them from means.
pub fn ndcg_at_k(scores: &[f64], labels: &LabelVector, k: usize) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(Error::shape("ndcg_at_k", labels.len(), scores.len()));
    }
    if k == 0 {
        return Err(Error::InvalidInput("cutoff must be >= 1".into()));
    }
    if labels.positives() == 0 {
        return Ok(None);
    }
    Ok(ndcg_with_gains(scores, &labels.to_f64(), k))
}

/// Mean price of the top `min(k, n)` ranked items.
pub fn aiv_at_k(prices: &[f64], scores: &[f64], k: usize) -> Result<f64> {
    if prices.len() != scores.len() {
        return Err(Error::shape("aiv_at_k", prices.len(), scores.len()));
    }
    if prices.is_empty() || k == 0 {
        return Err(Error::InvalidInput("AIV needs a non-empty list and k >= 1".into()));
    }
    let top = rank_order(scores);
    let m = k.min(prices.len());
    Ok(top.iter().take(m).map(|&i| prices[i]).sum::<f64>() / m as f64)
}

/// `100·(candidate − baseline)/baseline`.
pub fn relative_improvement(candidate: f64, baseline: f64) -> Result<f64> {
    if !(baseline > 0.0) || !candidate.is_finite() || !baseline.is_finite() {
        return Err(Error::InvalidInput(format!(
            "relative improvement needs a positive finite baseline, got {baseline}"
        )));
    }
    Ok(100.0 * (candidate - baseline) / baseline)
}

/// Two decimals with an explicit sign; values that round to zero print as
/// "0.00%".
pub fn format_percent(percent: f64) -> String {
    let text = format!("{:.2}", percent.abs());
    if text == "0.00" {
        "0.00%".to_string()
    } else if percent > 0.0 {
        format!("+{text}%")
    } else {
        format!("-{text}%")
    }
}

pub fn format_relative_improvement(candidate: f64, baseline: f64) -> Result<String> {
    relative_improvement(candidate, baseline).map(format_percent)
}
