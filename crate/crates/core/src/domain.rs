//! Core data types: the items × cases performance matrix with explicit
//! missingness, and the grouping of cases into experiments.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Items in rows, cases in columns. Each entry is either an observed score
/// in `[0, 1]` or absent. Zero is a legitimate observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceMatrix {
    item_ids: Vec<String>,
    case_ids: Vec<String>,
    rows: Vec<Vec<Option<f64>>>,
}

impl PerformanceMatrix {
    /// Builds a matrix and rejects it unless [`validate_matrix`] reports no issues.
    pub fn new(
        item_ids: Vec<String>,
        case_ids: Vec<String>,
        rows: Vec<Vec<Option<f64>>>,
    ) -> Result<Self> {
        let m = Self::from_rows_unchecked(item_ids, case_ids, rows);
        let report = validate_matrix(&m);
        if report.ok {
            Ok(m)
        } else {
            let msg = report
                .issues
                .iter()
                .map(|(loc, msg)| format!("{loc}: {msg}"))
                .collect::<Vec<_>>()
                .join("; ");
            Err(Error::invalid(msg))
        }
    }

    /// Assembles a matrix without checking it. Use [`validate_matrix`] afterwards.
    pub fn from_rows_unchecked(
        item_ids: Vec<String>,
        case_ids: Vec<String>,
        rows: Vec<Vec<Option<f64>>>,
    ) -> Self {
        Self {
            item_ids,
            case_ids,
            rows,
        }
    }

    /// Fully observed matrix from dense rows.
    pub fn from_dense(
        item_ids: Vec<String>,
        case_ids: Vec<String>,
        rows: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let rows = rows
            .into_iter()
            .map(|r| r.into_iter().map(Some).collect())
            .collect();
        Self::new(item_ids, case_ids, rows)
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn n_cases(&self) -> usize {
        self.case_ids.len()
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn case_ids(&self) -> &[String] {
        &self.case_ids
    }

    pub fn rows(&self) -> &[Vec<Option<f64>>] {
        &self.rows
    }

    #[inline]
    pub fn get(&self, item: usize, case: usize) -> Option<f64> {
        self.rows[item][case]
    }

    pub(crate) fn set(&mut self, item: usize, case: usize, value: Option<f64>) {
        self.rows[item][case] = value;
    }

    pub fn item_index(&self, id: &str) -> Option<usize> {
        self.item_ids.iter().position(|x| x == id)
    }

    pub fn case_index(&self, id: &str) -> Option<usize> {
        self.case_ids.iter().position(|x| x == id)
    }

    /// Column `case` as an item-indexed vector.
    pub fn column(&self, case: usize) -> Vec<Option<f64>> {
        self.rows.iter().map(|r| r[case]).collect()
    }

    /// Observed values of one column, in item order.
    pub fn observed_in_column(&self, case: usize) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r[case]).collect()
    }

    pub fn observed_count(&self) -> usize {
        self.rows
            .iter()
            .map(|r| r.iter().filter(|v| v.is_some()).count())
            .sum()
    }

    pub fn is_fully_observed(&self) -> bool {
        self.rows.iter().all(|r| r.iter().all(Option::is_some))
    }

    /// Dense copy; panics-free only when fully observed, otherwise `None`.
    pub fn to_dense(&self) -> Option<Vec<Vec<f64>>> {
        self.rows
            .iter()
            .map(|r| r.iter().copied().collect::<Option<Vec<f64>>>())
            .collect()
    }

    /// Keeps the given case columns, in the given order.
    pub fn select_cases(&self, keep: &[usize]) -> Self {
        Self {
            item_ids: self.item_ids.clone(),
            case_ids: keep.iter().map(|&j| self.case_ids[j].clone()).collect(),
            rows: self
                .rows
                .iter()
                .map(|r| keep.iter().map(|&j| r[j]).collect())
                .collect(),
        }
    }

    /// Drops every case whose id is in `drop`, preserving column order.
    pub fn without_cases(&self, drop: &HashSet<&str>) -> Self {
        let keep: Vec<usize> = (0..self.n_cases())
            .filter(|&j| !drop.contains(self.case_ids[j].as_str()))
            .collect();
        self.select_cases(&keep)
    }

    /// Content hash over ids, shape and entry bits.
    pub fn content_hash(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.item_ids.hash(&mut h);
        self.case_ids.hash(&mut h);
        for r in &self.rows {
            for v in r {
                match v {
                    Some(x) => {
                        1u8.hash(&mut h);
                        x.to_bits().hash(&mut h);
                    }
                    None => 0u8.hash(&mut h),
                }
            }
        }
        h.finish()
    }
}

/// Assignment of every case to exactly one experiment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentMap {
    experiment_ids: Vec<String>,
    assignments: BTreeMap<String, String>,
}

impl ExperimentMap {
    /// `assignments` maps case id to experiment id. Experiment order follows
    /// first appearance in `experiment_order` when given, else lexical order.
    pub fn new(
        assignments: BTreeMap<String, String>,
        experiment_order: Option<Vec<String>>,
    ) -> Result<Self> {
        let used: HashSet<&String> = assignments.values().collect();
        let experiment_ids = match experiment_order {
            Some(order) => {
                let mut seen = HashSet::new();
                for e in &order {
                    if !seen.insert(e) {
                        return Err(Error::invalid(format!("duplicate experiment id `{e}`")));
                    }
                    if !used.contains(e) {
                        return Err(Error::invalid(format!("experiment `{e}` has no cases")));
                    }
                }
                if let Some(missing) = used.iter().find(|e| !seen.contains(**e)) {
                    return Err(Error::UnknownExperiment((*missing).clone()));
                }
                order
            }
            None => {
                let mut v: Vec<String> = used.into_iter().cloned().collect();
                v.sort();
                v
            }
        };
        Ok(Self {
            experiment_ids,
            assignments,
        })
    }

    pub fn from_pairs<I, C, E>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (C, E)>,
        C: Into<String>,
        E: Into<String>,
    {
        let mut assignments = BTreeMap::new();
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        for (c, e) in pairs {
            let (c, e) = (c.into(), e.into());
            if seen.insert(e.clone()) {
                order.push(e.clone());
            }
            if assignments.insert(c.clone(), e).is_some() {
                return Err(Error::invalid(format!("case `{c}` assigned twice")));
            }
        }
        Self::new(assignments, Some(order))
    }

    pub fn experiment_ids(&self) -> &[String] {
        &self.experiment_ids
    }

    pub fn n_experiments(&self) -> usize {
        self.experiment_ids.len()
    }

    pub fn assignments(&self) -> &BTreeMap<String, String> {
        &self.assignments
    }

    pub fn experiment_of(&self, case_id: &str) -> Option<&str> {
        self.assignments.get(case_id).map(String::as_str)
    }

    pub fn contains_experiment(&self, e: &str) -> bool {
        self.experiment_ids.iter().any(|x| x == e)
    }

    /// Case ids of experiment `e` in lexical order.
    pub fn cases_of(&self, e: &str) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|(_, v)| v.as_str() == e)
            .map(|(k, _)| k.as_str())
            .collect()
    }

    /// Experiment id → case ids.
    pub fn groups(&self) -> HashMap<&str, Vec<&str>> {
        let mut g: HashMap<&str, Vec<&str>> = HashMap::new();
        for (c, e) in &self.assignments {
            g.entry(e.as_str()).or_default().push(c.as_str());
        }
        g
    }

    /// Checks that every case of `m` has an experiment and vice versa.
    pub fn check_covers(&self, m: &PerformanceMatrix) -> Result<()> {
        let cases: HashSet<&str> = m.case_ids().iter().map(String::as_str).collect();
        let mut missing: Vec<&str> = cases
            .iter()
            .copied()
            .filter(|c| !self.assignments.contains_key(*c))
            .collect();
        missing.sort();
        if !missing.is_empty() {
            return Err(Error::invalid(format!(
                "cases without experiment: {}",
                missing.join(", ")
            )));
        }
        let mut extra: Vec<&str> = self
            .assignments
            .keys()
            .map(String::as_str)
            .filter(|c| !cases.contains(c))
            .collect();
        extra.sort();
        if !extra.is_empty() {
            return Err(Error::invalid(format!(
                "experiment map lists cases absent from the matrix: {}",
                extra.join(", ")
            )));
        }
        Ok(())
    }

    fn without_experiment(&self, e: &str) -> Self {
        Self {
            experiment_ids: self
                .experiment_ids
                .iter()
                .filter(|x| x.as_str() != e)
                .cloned()
                .collect(),
            assignments: self
                .assignments
                .iter()
                .filter(|(_, v)| v.as_str() != e)
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub issues: Vec<(String, String)>,
}

impl ValidationReport {
    fn from_issues(issues: Vec<(String, String)>) -> Self {
        Self {
            ok: issues.is_empty(),
            issues,
        }
    }
}

/// Reports out-of-range or non-finite entries, duplicate ids and dimension
/// mismatches. Never fails; the report carries every problem found.
pub fn validate_matrix(m: &PerformanceMatrix) -> ValidationReport {
    let mut issues = Vec::new();
    if m.rows.len() != m.item_ids.len() {
        issues.push((
            "matrix".to_string(),
            format!(
                "{} rows but {} item ids",
                m.rows.len(),
                m.item_ids.len()
            ),
        ));
    }
    for (i, row) in m.rows.iter().enumerate() {
        let item = m.item_ids.get(i).map_or_else(|| format!("row {i}"), Clone::clone);
        if row.len() != m.case_ids.len() {
            issues.push((
                format!("item {item}"),
                format!("{} entries but {} case ids", row.len(), m.case_ids.len()),
            ));
        }
        for (j, v) in row.iter().enumerate() {
            if let Some(x) = v {
                if !(0.0..=1.0).contains(x) {
                    let case = m.case_ids.get(j).map_or_else(|| format!("column {j}"), Clone::clone);
                    issues.push((
                        format!("({item}, {case})"),
                        format!("value {x} outside [0, 1]"),
                    ));
                }
            }
        }
    }
    for (kind, ids) in [("item", &m.item_ids), ("case", &m.case_ids)] {
        let mut seen = HashSet::new();
        let mut reported = HashSet::new();
        for id in ids.iter() {
            if !seen.insert(id) && reported.insert(id) {
                issues.push((format!("{kind} ids"), format!("duplicate {kind} id `{id}`")));
            }
        }
    }
    ValidationReport::from_issues(issues)
}

/// Removes every case of experiment `e` from both the matrix and the map.
pub fn drop_experiment(
    m: &PerformanceMatrix,
    em: &ExperimentMap,
    e: &str,
) -> Result<(PerformanceMatrix, ExperimentMap)> {
    if !em.contains_experiment(e) {
        return Err(Error::UnknownExperiment(e.to_string()));
    }
    let drop: HashSet<&str> = em.cases_of(e).into_iter().collect();
    Ok((m.without_cases(&drop), em.without_experiment(e)))
}

pub fn observed_fraction(m: &PerformanceMatrix) -> Result<f64> {
    let n = m.n_items() * m.n_cases();
    if n == 0 {
        return Err(Error::EmptyMatrix);
    }
    Ok(m.observed_count() as f64 / n as f64)
}
