//! Case metadata encoding, case–case distances and k-nearest-neighbour
//! lookup for the content-based half of the recommender.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalFeature {
    pub name: String,
    pub options: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousFeature {
    pub name: String,
    pub min: f64,
    pub max: f64,
}

impl ContinuousFeature {
    fn span(&self) -> f64 {
        self.max - self.min
    }
}

/// Ordered feature definitions. Continuous bounds are dataset-wide so that
/// scaled values do not depend on which cases happen to be in a fold.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureSchema {
    #[serde(default)]
    pub categorical: Vec<CategoricalFeature>,
    #[serde(default)]
    pub continuous: Vec<ContinuousFeature>,
}

impl FeatureSchema {
    pub fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        for name in self
            .categorical
            .iter()
            .map(|f| &f.name)
            .chain(self.continuous.iter().map(|f| &f.name))
        {
            if !names.insert(name) {
                return Err(Error::SchemaMismatch(format!("duplicate feature `{name}`")));
            }
        }
        for f in &self.categorical {
            if f.options.len() < 2 {
                return Err(Error::SchemaMismatch(format!(
                    "categorical feature `{}` needs at least 2 options",
                    f.name
                )));
            }
            let unique: HashSet<&String> = f.options.iter().collect();
            if unique.len() != f.options.len() {
                return Err(Error::SchemaMismatch(format!(
                    "categorical feature `{}` repeats an option",
                    f.name
                )));
            }
        }
        for f in &self.continuous {
            if !(f.min.is_finite() && f.max.is_finite() && f.min < f.max) {
                return Err(Error::SchemaMismatch(format!(
                    "continuous feature `{}` needs finite min < max",
                    f.name
                )));
            }
        }
        Ok(())
    }

    pub fn n_features(&self) -> usize {
        self.categorical.len() + self.continuous.len()
    }

    pub fn encoded_len(&self) -> usize {
        self.continuous.len() + self.categorical.iter().map(|f| f.options.len()).sum::<usize>()
    }

    /// Checks that `f` has a value for every feature and only listed options.
    pub fn check(&self, f: &CaseFeatures) -> Result<()> {
        for cat in &self.categorical {
            let v = f.categorical.get(&cat.name).ok_or_else(|| {
                Error::SchemaMismatch(format!("case `{}` lacks feature `{}`", f.case_id, cat.name))
            })?;
            if !cat.options.contains(v) {
                return Err(Error::SchemaMismatch(format!(
                    "case `{}`: `{v}` is not an option of `{}`",
                    f.case_id, cat.name
                )));
            }
        }
        for cont in &self.continuous {
            let v = f.continuous.get(&cont.name).ok_or_else(|| {
                Error::SchemaMismatch(format!("case `{}` lacks feature `{}`", f.case_id, cont.name))
            })?;
            if !v.is_finite() {
                return Err(Error::SchemaMismatch(format!(
                    "case `{}`: `{}` is not finite",
                    f.case_id, cont.name
                )));
            }
        }
        Ok(())
    }
}

/// Raw metadata of one case, keyed by feature name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseFeatures {
    pub case_id: String,
    #[serde(default)]
    pub categorical: BTreeMap<String, String>,
    #[serde(default)]
    pub continuous: BTreeMap<String, f64>,
}

impl CaseFeatures {
    pub fn new(case_id: impl Into<String>) -> Self {
        Self {
            case_id: case_id.into(),
            categorical: BTreeMap::new(),
            continuous: BTreeMap::new(),
        }
    }

    pub fn with_categorical(mut self, name: &str, option: &str) -> Self {
        self.categorical.insert(name.to_string(), option.to_string());
        self
    }

    pub fn with_continuous(mut self, name: &str, value: f64) -> Self {
        self.continuous.insert(name.to_string(), value);
        self
    }
}

/// Features of all known cases.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CaseFeatureTable {
    pub cases: Vec<CaseFeatures>,
}

impl CaseFeatureTable {
    pub fn new(cases: Vec<CaseFeatures>) -> Self {
        Self { cases }
    }

    pub fn get(&self, case_id: &str) -> Option<&CaseFeatures> {
        self.cases.iter().find(|c| c.case_id == case_id)
    }

    /// Features for `ids` in the same order; fails on the first unknown id.
    pub fn select<'a, I>(&self, ids: I) -> Result<Vec<CaseFeatures>>
    where
        I: IntoIterator<Item = &'a str>,
    {
        ids.into_iter()
            .map(|id| {
                self.get(id)
                    .cloned()
                    .ok_or_else(|| Error::UnknownCase(id.to_string()))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub feature: String,
    /// Option name for one-hot components, `None` for a scaled scalar.
    pub option: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedVector {
    pub values: Vec<f64>,
    pub layout: Vec<LayoutEntry>,
}

/// Scaled continuous features in schema order, then one one-hot block per
/// categorical feature. Out-of-range continuous values are clamped.
pub fn encode_case(f: &CaseFeatures, s: &FeatureSchema) -> Result<EncodedVector> {
    s.check(f)?;
    let mut values = Vec::with_capacity(s.encoded_len());
    let mut layout = Vec::with_capacity(s.encoded_len());
    for cont in &s.continuous {
        let raw = f.continuous[&cont.name];
        let scaled = (raw - cont.min) / cont.span();
        if !(0.0..=1.0).contains(&scaled) {
            log::warn!(
                "case `{}`: `{}` = {raw} outside [{}, {}], clamped",
                f.case_id,
                cont.name,
                cont.min,
                cont.max
            );
        }
        values.push(scaled.clamp(0.0, 1.0));
        layout.push(LayoutEntry {
            feature: cont.name.clone(),
            option: None,
        });
    }
    for cat in &s.categorical {
        let chosen = &f.categorical[&cat.name];
        for opt in &cat.options {
            values.push(if opt == chosen { 1.0 } else { 0.0 });
            layout.push(LayoutEntry {
                feature: cat.name.clone(),
                option: Some(opt.clone()),
            });
        }
    }
    Ok(EncodedVector { values, layout })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    Euclidean,
    Cosine,
    Gower,
}

impl DistanceMetric {
    pub const ALL: [DistanceMetric; 3] = [
        DistanceMetric::Euclidean,
        DistanceMetric::Cosine,
        DistanceMetric::Gower,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            DistanceMetric::Euclidean => "euclidean",
            DistanceMetric::Cosine => "cosine",
            DistanceMetric::Gower => "gower",
        }
    }
}

impl fmt::Display for DistanceMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DistanceMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euclidean" => Ok(DistanceMetric::Euclidean),
            "cosine" => Ok(DistanceMetric::Cosine),
            "gower" => Ok(DistanceMetric::Gower),
            other => Err(Error::invalid(format!("unknown distance metric `{other}`"))),
        }
    }
}

/// Distance between two encoded vectors (Euclidean or cosine only; Gower is
/// defined on raw features, see [`distance`]).
pub fn encoded_distance(a: &EncodedVector, b: &EncodedVector, metric: DistanceMetric) -> Result<f64> {
    if a.layout != b.layout {
        return Err(Error::SchemaMismatch("encoded layouts differ".into()));
    }
    match metric {
        DistanceMetric::Euclidean => Ok(euclidean(&a.values, &b.values)),
        DistanceMetric::Cosine => cosine(&a.values, &b.values),
        DistanceMetric::Gower => Err(Error::invalid(
            "gower distance needs raw case features, not encoded vectors",
        )),
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a == b && a.iter().any(|x| *x != 0.0) {
        return Ok(0.0);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    match (na == 0.0, nb == 0.0) {
        (true, true) => Err(Error::invalid("cosine distance of two zero vectors")),
        // orthogonal by convention when only one side is zero
        (true, false) | (false, true) => Ok(1.0),
        _ => Ok((1.0 - dot / (na * nb)).clamp(0.0, 2.0)),
    }
}

fn gower(a: &CaseFeatures, b: &CaseFeatures, s: &FeatureSchema) -> f64 {
    let n = s.n_features();
    if n == 0 {
        return 0.0;
    }
    let cat: f64 = s
        .categorical
        .iter()
        .map(|f| {
            if a.categorical[&f.name] == b.categorical[&f.name] {
                0.0
            } else {
                1.0
            }
        })
        .sum();
    let cont: f64 = s
        .continuous
        .iter()
        .map(|f| ((a.continuous[&f.name] - b.continuous[&f.name]).abs() / f.span()).clamp(0.0, 1.0))
        .sum();
    (cat + cont) / n as f64
}

/// Distance between two cases under `metric`. Euclidean and cosine compare
/// encoded vectors; Gower averages per-feature distances on raw values.
pub fn distance(
    a: &CaseFeatures,
    b: &CaseFeatures,
    metric: DistanceMetric,
    s: &FeatureSchema,
) -> Result<f64> {
    match metric {
        DistanceMetric::Gower => {
            s.check(a)?;
            s.check(b)?;
            Ok(gower(a, b, s))
        }
        _ => encoded_distance(&encode_case(a, s)?, &encode_case(b, s)?, metric),
    }
}

fn neighbour_order(a: &(String, f64), b: &(String, f64)) -> Ordering {
    a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0))
}

/// All candidates sorted by ascending distance to `q`, ties by case id.
pub fn ranked_candidates(
    q: &CaseFeatures,
    candidates: &[CaseFeatures],
    metric: DistanceMetric,
    s: &FeatureSchema,
) -> Result<Vec<(String, f64)>> {
    if candidates.is_empty() {
        return Err(Error::invalid("no candidate cases"));
    }
    let mut out = match metric {
        DistanceMetric::Gower => {
            s.check(q)?;
            candidates
                .iter()
                .map(|c| {
                    s.check(c)?;
                    Ok((c.case_id.clone(), gower(q, c, s)))
                })
                .collect::<Result<Vec<_>>>()?
        }
        _ => {
            let qe = encode_case(q, s)?;
            candidates
                .iter()
                .map(|c| {
                    let ce = encode_case(c, s)?;
                    Ok((c.case_id.clone(), encoded_distance(&qe, &ce, metric)?))
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    out.sort_by(neighbour_order);
    Ok(out)
}

/// The `min(k, |candidates|)` closest candidates, ascending by distance.
pub fn nearest_neighbors(
    q: &CaseFeatures,
    candidates: &[CaseFeatures],
    k: usize,
    metric: DistanceMetric,
    s: &FeatureSchema,
) -> Result<Vec<(String, f64)>> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let mut ranked = ranked_candidates(q, candidates, metric, s)?;
    ranked.truncate(k);
    Ok(ranked)
}
