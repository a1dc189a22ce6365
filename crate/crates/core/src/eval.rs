//! Relevance sets, reciprocal-rank metrics, regret and confidence intervals.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::domain::ExperimentMap;
use crate::error::{Error, Result};

pub const DEFAULT_RELEVANCE_THRESHOLD: f64 = 0.05;

// absorbs decimal rounding such as 0.90 - 0.05 != 0.85
const THRESHOLD_SLACK: f64 = 1e-12;

/// Items whose ground-truth performance is within `threshold` of the case's
/// best item, sorted by performance descending (ties by item id).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceSet {
    pub case_id: String,
    pub best_performance: f64,
    pub threshold: f64,
    pub relevant: Vec<(String, f64)>,
}

impl RelevanceSet {
    pub fn contains(&self, item: &str) -> bool {
        self.relevant.iter().any(|(i, _)| i == item)
    }

    pub fn len(&self) -> usize {
        self.relevant.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relevant.is_empty()
    }
}

/// `column` holds (item id, ground-truth performance) for one case.
pub fn relevant_items(
    case_id: &str,
    column: &[(String, f64)],
    threshold: f64,
) -> Result<RelevanceSet> {
    if column.is_empty() {
        return Err(Error::invalid(format!("case `{case_id}` has an empty column")));
    }
    if threshold.is_nan() || threshold < 0.0 {
        return Err(Error::invalid("relevance threshold must be non-negative"));
    }
    let best = column
        .iter()
        .map(|(_, p)| *p)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut relevant: Vec<(String, f64)> = column
        .iter()
        .filter(|(_, p)| best - *p <= threshold + THRESHOLD_SLACK)
        .cloned()
        .collect();
    relevant.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(RelevanceSet {
        case_id: case_id.to_string(),
        best_performance: best,
        threshold,
        relevant,
    })
}

/// Reciprocal rank of the highest-placed relevant item within the top `k`,
/// or 0. `k` beyond the list length is treated as the list length.
pub fn rr_at_k(ranking: &[String], rel: &RelevanceSet, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let mut seen = HashSet::with_capacity(ranking.len());
    if let Some(dup) = ranking.iter().find(|i| !seen.insert(i.as_str())) {
        return Err(Error::invalid(format!("ranking repeats item `{dup}`")));
    }
    Ok(ranking
        .iter()
        .take(k)
        .position(|item| rel.contains(item))
        .map_or(0.0, |pos| 1.0 / (pos + 1) as f64))
}

/// Mean RR over the sub-cases of experiment `e`. Entries for cases of other
/// experiments are ignored; each case of `e` must appear exactly once.
pub fn rr_per_experiment(case_rrs: &[(String, f64)], em: &ExperimentMap, e: &str) -> Result<f64> {
    if !em.contains_experiment(e) {
        return Err(Error::UnknownExperiment(e.to_string()));
    }
    let cases = em.cases_of(e);
    let mut found: HashMap<&str, f64> = HashMap::new();
    for (c, rr) in case_rrs {
        if em.experiment_of(c) == Some(e) && found.insert(c.as_str(), *rr).is_some() {
            return Err(Error::invalid(format!("case `{c}` scored twice")));
        }
    }
    let mut sum = 0.0;
    for c in &cases {
        sum += found
            .get(c)
            .ok_or_else(|| Error::invalid(format!("experiment `{e}` lacks a score for case `{c}`")))?;
    }
    Ok(sum / cases.len() as f64)
}

/// Mean over experiments, each weighing equally.
pub fn mrr(experiment_rrs: &[f64]) -> Result<f64> {
    if experiment_rrs.is_empty() {
        return Err(Error::invalid("no experiments to average"));
    }
    Ok(experiment_rrs.iter().sum::<f64>() / experiment_rrs.len() as f64)
}

/// Two-level mean of per-case values: within each experiment that has at
/// least one case in `case_values`, then across those experiments.
pub fn experiment_balanced_mean(case_values: &[(String, f64)], em: &ExperimentMap) -> Result<f64> {
    let mut per_exp: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for (c, v) in case_values {
        let e = em
            .experiment_of(c)
            .ok_or_else(|| Error::UnknownCase(c.clone()))?;
        let slot = per_exp.entry(e).or_insert((0.0, 0));
        slot.0 += v;
        slot.1 += 1;
    }
    let means: Vec<f64> = per_exp.values().map(|(s, n)| s / *n as f64).collect();
    mrr(&means)
}

/// Best ground-truth performance minus that of `chosen`.
pub fn regret(column: &[(String, f64)], chosen: &str) -> Result<f64> {
    let best = column
        .iter()
        .map(|(_, p)| *p)
        .fold(f64::NEG_INFINITY, f64::max);
    let picked = column
        .iter()
        .find(|(i, _)| i == chosen)
        .ok_or_else(|| Error::UnknownItem(chosen.to_string()))?;
    Ok(best - picked.1)
}

/// Normal-approximation interval `mean ± z·sd/sqrt(n)` with the sample
/// standard deviation. Returns `(mean, lo, hi)`.
pub fn confidence_interval(samples: &[f64], level: f64) -> Result<(f64, f64, f64)> {
    if samples.len() < 2 {
        return Err(Error::invalid("confidence interval needs at least 2 samples"));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid("confidence level must lie in (0, 1)"));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let z = Normal::new(0.0, 1.0)
        .expect("unit normal")
        .inverse_cdf(0.5 + level / 2.0);
    let half = z * var.sqrt() / n.sqrt();
    Ok((mean, mean - half, mean + half))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Case,
    Experiment,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MetricKind {
    #[serde(rename = "rr@1")]
    Rr1,
    #[serde(rename = "rr@3")]
    Rr3,
    #[serde(rename = "mrr@1")]
    Mrr1,
    #[serde(rename = "mrr@3")]
    Mrr3,
    #[serde(rename = "regret")]
    Regret,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub level: Level,
    pub metric: MetricKind,
    pub value: f64,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
}

impl MetricRecord {
    /// Record with a normal-approximation CI when there are at least 2 samples.
    pub fn from_samples(level: Level, metric: MetricKind, samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("no samples"));
        }
        match confidence_interval(samples, 0.95) {
            Ok((mean, lo, hi)) => Ok(Self {
                level,
                metric,
                value: mean,
                ci_low: Some(lo),
                ci_high: Some(hi),
            }),
            Err(_) => Ok(Self {
                level,
                metric,
                value: samples[0],
                ci_low: None,
                ci_high: None,
            }),
        }
    }
}
