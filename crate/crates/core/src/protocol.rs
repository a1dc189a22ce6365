//! Sparsification and the experiment-level nested cross-validation used to
//! evaluate the recommender against its baselines.
//!
//! The outer loop holds out one experiment at a time. Hyperparameters are
//! chosen by an inner leave-one-experiment-out loop over the remaining
//! experiments only, so nothing about the held-out experiment's
//! performances can influence training or tuning. Every matrix that feeds a
//! fit or a neighbourhood lookup is recorded in an [`AccessTrace`] and
//! checked by [`leakage_audit`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::completion::{complete, CompletionConfig};
use crate::domain::{drop_experiment, ExperimentMap, PerformanceMatrix};
use crate::error::{Error, Result};
use crate::eval::{
    confidence_interval, mrr, regret, relevant_items, rr_at_k, RelevanceSet,
    DEFAULT_RELEVANCE_THRESHOLD,
};
use crate::features::{ranked_candidates, CaseFeatureTable, DistanceMetric, FeatureSchema};
use crate::recommend::{
    expected_random_regret, expected_random_rr, popularity_ranking, random_recommendation,
    rank_by_score, reference_item, score_items, PopularityMode,
};

/// Removes exactly `round(s·N)` entries of a fully observed matrix, chosen
/// uniformly without replacement.
pub fn sparsify(m: &PerformanceMatrix, s: f64, seed: u64) -> Result<PerformanceMatrix> {
    if !(0.0..1.0).contains(&s) {
        return Err(Error::invalid(format!("sparsity {s} outside [0, 1)")));
    }
    if !m.is_fully_observed() {
        return Err(Error::invalid("sparsify needs a fully observed matrix"));
    }
    let n = m.n_items() * m.n_cases();
    let remove = (s * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = m.clone();
    for flat in rand::seq::index::sample(&mut rng, n, remove) {
        out.set(flat / m.n_cases(), flat % m.n_cases(), None);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperGrid {
    pub metrics: Vec<DistanceMetric>,
    pub k_values: Vec<usize>,
}

impl Default for HyperGrid {
    fn default() -> Self {
        Self {
            metrics: DistanceMetric::ALL.to_vec(),
            k_values: vec![1, 2, 3, 5, 10, 15, 20, 30, 50],
        }
    }
}

impl HyperGrid {
    pub fn validate(&self) -> Result<()> {
        if self.metrics.is_empty() || self.k_values.is_empty() {
            return Err(Error::invalid("hyperparameter grid has an empty axis"));
        }
        if self.k_values.contains(&0) {
            return Err(Error::invalid("k values must be positive"));
        }
        Ok(())
    }

    /// Configurations in tie-break order: smaller k first, then metric order.
    pub fn configs(&self) -> Vec<(DistanceMetric, usize)> {
        let ks: BTreeSet<usize> = self.k_values.iter().copied().collect();
        let ms: BTreeSet<DistanceMetric> = self.metrics.iter().copied().collect();
        ks.iter()
            .flat_map(|&k| ms.iter().map(move |&m| (m, k)))
            .collect()
    }

    pub fn size(&self) -> usize {
        self.configs().len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SelectionMetric {
    #[default]
    #[serde(rename = "mrr@3")]
    Mrr3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CVConfig {
    pub sparsity_levels: Vec<f64>,
    pub n_realisations: usize,
    pub rng_seed: u64,
    pub completion: CompletionConfig,
    pub grid: HyperGrid,
    pub relevance_threshold: f64,
    pub selection_metric: SelectionMetric,
    pub popularity: PopularityMode,
    /// Length of the sampled random recommendation lists.
    pub random_list_length: usize,
}

impl Default for CVConfig {
    fn default() -> Self {
        Self {
            sparsity_levels: vec![0.25, 0.5, 0.75, 0.9],
            n_realisations: 100,
            rng_seed: 0,
            completion: CompletionConfig::default(),
            grid: HyperGrid::default(),
            relevance_threshold: DEFAULT_RELEVANCE_THRESHOLD,
            selection_metric: SelectionMetric::Mrr3,
            popularity: PopularityMode::ExperimentBalanced,
            random_list_length: 3,
        }
    }
}

impl CVConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.sparsity_levels.iter().find(|s| !(0.0..1.0).contains(*s)) {
            return Err(Error::invalid(format!("sparsity {s} outside [0, 1)")));
        }
        if self.n_realisations == 0 {
            return Err(Error::invalid("need at least one realisation"));
        }
        if self.relevance_threshold.is_nan() || self.relevance_threshold < 0.0 {
            return Err(Error::invalid("relevance threshold must be non-negative"));
        }
        if self.random_list_length == 0 {
            return Err(Error::invalid("random list length must be positive"));
        }
        self.grid.validate()?;
        self.completion.validate()
    }
}

// splitmix64 finaliser
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Child seed of `parent` for the path `tags`.
pub fn derive_seed(parent: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix(parent), |acc, t| mix(acc ^ mix(*t)))
}

// stable across platforms and releases, unlike the std hasher
fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

const TAG_COMPLETION: u64 = 1;
const TAG_RANDOM: u64 = 2;

/// Seed of one (sparsity, realisation) pair.
pub fn realisation_seed(master: u64, sparsity: f64, realisation: usize) -> u64 {
    derive_seed(master, &[sparsity.to_bits(), realisation as u64])
}

/// Cases whose performance entries were read while training or tuning for
/// one test experiment.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccessTrace {
    pub test_experiment: String,
    pub performance_cases: BTreeSet<String>,
}

impl AccessTrace {
    fn new(test_experiment: &str) -> Self {
        Self {
            test_experiment: test_experiment.to_string(),
            performance_cases: BTreeSet::new(),
        }
    }

    fn touch(&mut self, m: &PerformanceMatrix) {
        self.performance_cases.extend(m.case_ids().iter().cloned());
    }
}

/// True iff no performance entry of a case of `e` appears in `trace`.
/// Feature reads are not part of the audit.
pub fn leakage_audit(trace: &AccessTrace, em: &ExperimentMap, e: &str) -> bool {
    em.cases_of(e)
        .iter()
        .all(|c| !trace.performance_cases.contains(*c))
}

type FitCache = Mutex<HashMap<u64, Vec<Arc<(PerformanceMatrix, PerformanceMatrix)>>>>;

struct Completer<'a> {
    cfg: CompletionConfig,
    cache: &'a FitCache,
}

impl Completer<'_> {
    fn complete(&self, m: &PerformanceMatrix) -> Result<PerformanceMatrix> {
        let key = m.content_hash();
        if let Some(hit) = self
            .cache
            .lock()
            .expect("fit cache poisoned")
            .get(&key)
            .and_then(|v| v.iter().find(|e| e.0 == *m).cloned())
        {
            return Ok(hit.1.clone());
        }
        let done = complete(m, &self.cfg)?;
        if !done.converged {
            log::debug!("completion stopped after {} iterations", done.iterations);
        }
        let entry = Arc::new((m.clone(), done.matrix.clone()));
        let mut cache = self.cache.lock().expect("fit cache poisoned");
        let slot = cache.entry(key).or_default();
        slot.retain(|e| e.0 != *m);
        slot.push(entry);
        Ok(done.matrix)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRow {
    pub metric: DistanceMetric,
    pub k: usize,
    pub mrr1: f64,
    pub mrr3: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerCvResult {
    pub best_metric: DistanceMetric,
    pub best_k: usize,
    /// One row per grid configuration, in tie-break order.
    pub table: Vec<ValidationRow>,
}

impl InnerCvResult {
    pub fn best_row(&self) -> &ValidationRow {
        self.table
            .iter()
            .find(|r| r.metric == self.best_metric && r.k == self.best_k)
            .expect("best config is in the table")
    }
}

fn truth_column(truth: &PerformanceMatrix, case: &str) -> Result<Vec<(String, f64)>> {
    let j = truth
        .case_index(case)
        .ok_or_else(|| Error::UnknownCase(case.to_string()))?;
    truth
        .item_ids()
        .iter()
        .enumerate()
        .map(|(i, item)| {
            truth
                .get(i, j)
                .map(|v| (item.clone(), v))
                .ok_or_else(|| Error::invalid(format!("ground truth missing ({item}, {case})")))
        })
        .collect()
}

/// Chooses (metric, k) by leave-one-experiment-out validation on
/// `observed`. `truth` supplies the ground truth of the validation cases and
/// must cover every case of `observed`.
pub fn inner_cv(
    observed: &PerformanceMatrix,
    truth: &PerformanceMatrix,
    features: &CaseFeatureTable,
    schema: &FeatureSchema,
    em: &ExperimentMap,
    cfg: &CVConfig,
) -> Result<InnerCvResult> {
    let cache = FitCache::default();
    let completer = Completer {
        cfg: cfg.completion.clone(),
        cache: &cache,
    };
    let mut trace = AccessTrace::default();
    inner_cv_traced(observed, truth, features, schema, em, cfg, &completer, &mut trace)
}

#[allow(clippy::too_many_arguments)]
fn inner_cv_traced(
    observed: &PerformanceMatrix,
    truth: &PerformanceMatrix,
    features: &CaseFeatureTable,
    schema: &FeatureSchema,
    em: &ExperimentMap,
    cfg: &CVConfig,
    completer: &Completer<'_>,
    trace: &mut AccessTrace,
) -> Result<InnerCvResult> {
    cfg.grid.validate()?;
    em.check_covers(observed)?;
    let experiments: Vec<&str> = em
        .experiment_ids()
        .iter()
        .map(String::as_str)
        .filter(|e| !em.cases_of(e).is_empty())
        .collect();
    if experiments.len() < 2 {
        return Err(Error::invalid(format!(
            "inner validation needs at least 2 experiments, got {}",
            experiments.len()
        )));
    }
    let configs = cfg.grid.configs();
    let metrics: BTreeSet<DistanceMetric> = configs.iter().map(|c| c.0).collect();
    // per config: (rr1, rr3) per validation experiment
    let mut per_config: Vec<Vec<(f64, f64)>> = vec![Vec::new(); configs.len()];

    for v in &experiments {
        let (train, _) = drop_experiment(observed, em, v)?;
        trace.touch(&train);
        let completed = completer.complete(&train)?;
        let candidates = features.select(train.case_ids().iter().map(String::as_str))?;
        let v_cases = em.cases_of(v);
        trace.touch(&truth.select_cases(
            &v_cases
                .iter()
                .filter_map(|c| truth.case_index(c))
                .collect::<Vec<_>>(),
        ));
        let mut sums = vec![(0.0, 0.0); configs.len()];
        for case in &v_cases {
            let q = features
                .get(case)
                .ok_or_else(|| Error::UnknownCase(case.to_string()))?;
            let rel = relevant_items(case, &truth_column(truth, case)?, cfg.relevance_threshold)?;
            let ranked: BTreeMap<DistanceMetric, Vec<String>> = metrics
                .iter()
                .map(|&m| {
                    Ok((
                        m,
                        ranked_candidates(q, &candidates, m, schema)?
                            .into_iter()
                            .map(|(id, _)| id)
                            .collect(),
                    ))
                })
                .collect::<Result<_>>()?;
            for (ci, (m, k)) in configs.iter().enumerate() {
                let order = &ranked[m];
                let neighbours = &order[..(*k).min(order.len())];
                let res = score_items(case, neighbours, &train, &completed)?;
                sums[ci].0 += rr_at_k(&res.ranking, &rel, 1)?;
                sums[ci].1 += rr_at_k(&res.ranking, &rel, 3)?;
            }
        }
        let n = v_cases.len() as f64;
        for (ci, (s1, s3)) in sums.into_iter().enumerate() {
            per_config[ci].push((s1 / n, s3 / n));
        }
    }

    let table: Vec<ValidationRow> = configs
        .iter()
        .zip(&per_config)
        .map(|(&(metric, k), vals)| {
            Ok(ValidationRow {
                metric,
                k,
                mrr1: mrr(&vals.iter().map(|v| v.0).collect::<Vec<_>>())?,
                mrr3: mrr(&vals.iter().map(|v| v.1).collect::<Vec<_>>())?,
            })
        })
        .collect::<Result<_>>()?;
    let mut best = &table[0];
    for row in &table[1..] {
        if row.mrr3 > best.mrr3 {
            best = row;
        }
    }
    Ok(InnerCvResult {
        best_metric: best.metric,
        best_k: best.k,
        table,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "Pop")]
    Pop,
    #[serde(rename = "MC")]
    Mc,
    #[serde(rename = "RS")]
    Rs,
    Reference,
    Random,
    Oracle,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Pop,
        Method::Mc,
        Method::Rs,
        Method::Reference,
        Method::Random,
        Method::Oracle,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Pop => "Pop",
            Method::Mc => "MC",
            Method::Rs => "RS",
            Method::Reference => "Reference",
            Method::Random => "Random",
            Method::Oracle => "Oracle",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-case scores of one method, averaged over the test experiment's cases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodScore {
    pub method: Method,
    pub rr1: f64,
    /// Absent for the single-item reference recommendation.
    pub rr3: Option<f64>,
    pub regret: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub sparsity: f64,
    pub realisation: usize,
    pub test_experiment: String,
    pub seed: u64,
    pub chosen_metric: Option<DistanceMetric>,
    pub chosen_k: Option<usize>,
    pub val_mrr1: Option<f64>,
    pub val_mrr3: Option<f64>,
    pub scores: Vec<MethodScore>,
    pub audit_passed: bool,
    pub trace: AccessTrace,
    /// Set when the cell failed; failed cells are left out of aggregates.
    pub error: Option<String>,
}

impl CellResult {
    pub fn score(&self, m: Method) -> Option<&MethodScore> {
        self.scores.iter().find(|s| s.method == m)
    }
}

/// Mean with an optional normal-approximation 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
}

impl Summary {
    pub fn from_samples(samples: &[f64]) -> Option<Self> {
        match samples.len() {
            0 => None,
            1 => Some(Self {
                mean: samples[0],
                ci_low: None,
                ci_high: None,
            }),
            _ => {
                let (mean, lo, hi) = confidence_interval(samples, 0.95).ok()?;
                Some(Self {
                    mean,
                    ci_low: Some(lo),
                    ci_high: Some(hi),
                })
            }
        }
    }
}

/// One row of the sparsity-level comparison. `sparsity` is `None` for the
/// sparsity-independent reference and random rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub sparsity: Option<f64>,
    pub method: Method,
    pub n_realisations: usize,
    pub mrr1: Option<Summary>,
    pub mrr3: Option<Summary>,
    pub regret: Option<Summary>,
}

/// Per test experiment at one sparsity level, across realisations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub sparsity: f64,
    pub test_experiment: String,
    /// Most frequently selected configuration; ties by grid order.
    pub metric: DistanceMetric,
    pub k: usize,
    pub val_rr1: f64,
    pub val_rr3: f64,
    pub test_rr1: Summary,
    pub test_rr3: Summary,
    pub test_regret: Summary,
}

/// Closed-form expectations of a uniformly random recommendation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomExpectation {
    pub mrr1: f64,
    pub mrr3: f64,
    pub regret: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CVReport {
    pub config: CVConfig,
    pub grid_size: usize,
    pub cells: Vec<CellResult>,
    pub aggregates: Vec<AggregateRow>,
    pub experiments: Vec<ExperimentRow>,
    pub random_expectation: RandomExpectation,
    /// True only if every cell passed the leakage audit.
    pub leakage_audit: bool,
}

/// Runs the full evaluation on a fully observed ground-truth matrix.
pub fn run_nested_cv(
    truth: &PerformanceMatrix,
    features: &CaseFeatureTable,
    schema: &FeatureSchema,
    em: &ExperimentMap,
    reference: Option<&str>,
    cfg: &CVConfig,
) -> Result<CVReport> {
    run(truth, features, schema, em, reference, cfg, false)
}

/// Same as [`run_nested_cv`] but leaves the test experiment's columns in the
/// training matrix. Exists only to show that the audit catches the leak.
#[doc(hidden)]
pub fn run_nested_cv_without_test_drop(
    truth: &PerformanceMatrix,
    features: &CaseFeatureTable,
    schema: &FeatureSchema,
    em: &ExperimentMap,
    reference: Option<&str>,
    cfg: &CVConfig,
) -> Result<CVReport> {
    run(truth, features, schema, em, reference, cfg, true)
}

struct CellInputs<'a> {
    truth: &'a PerformanceMatrix,
    sparse: &'a PerformanceMatrix,
    features: &'a CaseFeatureTable,
    schema: &'a FeatureSchema,
    em: &'a ExperimentMap,
    reference: Option<&'a str>,
    cfg: &'a CVConfig,
    seed: u64,
    keep_test_columns: bool,
}

#[allow(clippy::too_many_arguments)]
fn run(
    truth: &PerformanceMatrix,
    features: &CaseFeatureTable,
    schema: &FeatureSchema,
    em: &ExperimentMap,
    reference: Option<&str>,
    cfg: &CVConfig,
    keep_test_columns: bool,
) -> Result<CVReport> {
    cfg.validate()?;
    if !truth.is_fully_observed() {
        return Err(Error::invalid("ground truth must be fully observed"));
    }
    em.check_covers(truth)?;
    schema.validate()?;
    features.select(truth.case_ids().iter().map(String::as_str))?;
    if let Some(r) = reference {
        reference_item(Some(r), truth)?;
    }

    let mut cells = Vec::new();
    for &s in &cfg.sparsity_levels {
        for r in 0..cfg.n_realisations {
            let seed = realisation_seed(cfg.rng_seed, s, r);
            let sparse = sparsify(truth, s, seed)?;
            let cache = FitCache::default();
            let mut completion = cfg.completion.clone();
            completion.rng_seed = derive_seed(seed, &[TAG_COMPLETION]);
            let completer = Completer {
                cfg: completion,
                cache: &cache,
            };
            let inputs = CellInputs {
                truth,
                sparse: &sparse,
                features,
                schema,
                em,
                reference,
                cfg,
                seed,
                keep_test_columns,
            };
            let batch: Vec<CellResult> = em
                .experiment_ids()
                .par_iter()
                .map(|e| {
                    let mut cell = run_cell(&inputs, &completer, e, s, r);
                    if let Some(msg) = &cell.error {
                        log::warn!("sparsity {s}, realisation {r}, experiment {e}: {msg}; excluded from aggregates");
                    }
                    cell.audit_passed = leakage_audit(&cell.trace, em, e);
                    cell
                })
                .collect();
            cells.extend(batch);
        }
    }

    let leakage = cells.iter().all(|c| c.audit_passed);
    let aggregates = aggregate(&cells, cfg, em);
    let experiments = experiment_rows(&cells, cfg, em);
    let random_expectation = random_expectation(truth, em, cfg.relevance_threshold)?;
    Ok(CVReport {
        config: cfg.clone(),
        grid_size: cfg.grid.size(),
        cells,
        aggregates,
        experiments,
        random_expectation,
        leakage_audit: leakage,
    })
}

fn run_cell(
    inp: &CellInputs<'_>,
    completer: &Completer<'_>,
    e: &str,
    s: f64,
    r: usize,
) -> CellResult {
    let mut cell = CellResult {
        sparsity: s,
        realisation: r,
        test_experiment: e.to_string(),
        seed: inp.seed,
        chosen_metric: None,
        chosen_k: None,
        val_mrr1: None,
        val_mrr3: None,
        scores: Vec::new(),
        audit_passed: false,
        trace: AccessTrace::new(e),
        error: None,
    };
    if let Err(err) = score_cell(inp, completer, e, &mut cell) {
        cell.scores.clear();
        cell.error = Some(err.to_string());
    }
    cell
}

fn score_cell(
    inp: &CellInputs<'_>,
    completer: &Completer<'_>,
    e: &str,
    cell: &mut CellResult,
) -> Result<()> {
    let (train, train_em) = if inp.keep_test_columns {
        (inp.sparse.clone(), inp.em.clone())
    } else {
        drop_experiment(inp.sparse, inp.em, e)?
    };
    let train_truth = inp.truth.select_cases(
        &train
            .case_ids()
            .iter()
            .map(|c| inp.truth.case_index(c).expect("same cases"))
            .collect::<Vec<_>>(),
    );

    let trace = &mut cell.trace;
    let inner = inner_cv_traced(
        &train,
        &train_truth,
        inp.features,
        inp.schema,
        &train_em,
        inp.cfg,
        completer,
        trace,
    )?;
    cell.chosen_metric = Some(inner.best_metric);
    cell.chosen_k = Some(inner.best_k);
    cell.val_mrr1 = Some(inner.best_row().mrr1);
    cell.val_mrr3 = Some(inner.best_row().mrr3);

    trace.touch(&train);
    let completed = completer.complete(&train)?;
    let pop = popularity_ranking(&train, &train_em, inp.cfg.popularity)?;
    let mc = popularity_ranking(&completed, &train_em, inp.cfg.popularity)?;
    let pop: Vec<String> = pop.into_iter().map(|(i, _)| i).collect();
    let mc: Vec<String> = mc.into_iter().map(|(i, _)| i).collect();
    let reference = inp.reference.map(|r| vec![r.to_string()]);
    let candidates = inp
        .features
        .select(train.case_ids().iter().map(String::as_str))?;

    let items = inp.truth.item_ids();
    let list_len = inp.cfg.random_list_length.min(items.len());
    let mut per_method: BTreeMap<Method, Vec<(f64, f64, f64)>> = BTreeMap::new();
    for case in inp.em.cases_of(e) {
        let column = truth_column(inp.truth, case)?;
        let rel = relevant_items(case, &column, inp.cfg.relevance_threshold)?;
        let q = inp
            .features
            .get(case)
            .ok_or_else(|| Error::UnknownCase(case.to_string()))?;
        let order = ranked_candidates(q, &candidates, inner.best_metric, inp.schema)?;
        let neighbours: Vec<String> = order
            .into_iter()
            .take(inner.best_k)
            .map(|(id, _)| id)
            .collect();
        let rs = score_items(case, &neighbours, &train, &completed)?.ranking;
        let random: Vec<String> = random_recommendation(
            items.len(),
            list_len,
            derive_seed(inp.seed, &[TAG_RANDOM, fnv1a(case)]),
        )?
        .into_iter()
        .map(|i| items[i].clone())
        .collect();
        let oracle = rank_by_score(&column);

        let mut lists: Vec<(Method, &[String])> = vec![
            (Method::Pop, &pop),
            (Method::Mc, &mc),
            (Method::Rs, &rs),
            (Method::Random, &random),
            (Method::Oracle, &oracle),
        ];
        if let Some(r) = &reference {
            lists.push((Method::Reference, r));
        }
        for (m, list) in lists {
            let scores = (
                rr_at_k(list, &rel, 1)?,
                rr_at_k(list, &rel, 3)?,
                regret(&column, &list[0])?,
            );
            per_method.entry(m).or_default().push(scores);
        }
    }
    cell.scores = per_method
        .into_iter()
        .map(|(method, v)| {
            let n = v.len() as f64;
            let mean = |f: fn(&(f64, f64, f64)) -> f64| v.iter().map(f).sum::<f64>() / n;
            MethodScore {
                method,
                rr1: mean(|x| x.0),
                rr3: (method != Method::Reference).then(|| mean(|x| x.1)),
                regret: mean(|x| x.2),
            }
        })
        .collect();
    Ok(())
}

/// Cells of one (sparsity, realisation), or `None` if any of them failed.
fn realisation_groups<'a>(
    cells: &'a [CellResult],
    em: &ExperimentMap,
) -> Vec<(f64, usize, Option<Vec<&'a CellResult>>)> {
    let mut groups: Vec<(f64, usize, Vec<&CellResult>)> = Vec::new();
    for c in cells {
        match groups.last_mut() {
            Some(g) if g.0 == c.sparsity && g.1 == c.realisation => g.2.push(c),
            _ => groups.push((c.sparsity, c.realisation, vec![c])),
        }
    }
    groups
        .into_iter()
        .map(|(s, r, mut g)| {
            let ok = g.iter().all(|c| c.error.is_none()) && g.len() == em.n_experiments();
            // fixed summation order regardless of experiment iteration order
            g.sort_by(|a, b| a.test_experiment.cmp(&b.test_experiment));
            (s, r, ok.then_some(g))
        })
        .collect()
}

/// (MRR@1, MRR@3, mean regret) over test experiments for one realisation.
fn realisation_means(group: &[&CellResult], m: Method) -> Option<(f64, Option<f64>, f64)> {
    let scores: Vec<&MethodScore> = group.iter().map(|c| c.score(m)).collect::<Option<_>>()?;
    let n = scores.len() as f64;
    let rr1 = scores.iter().map(|s| s.rr1).sum::<f64>() / n;
    let rr3 = scores
        .iter()
        .map(|s| s.rr3)
        .sum::<Option<f64>>()
        .map(|v| v / n);
    let reg = scores.iter().map(|s| s.regret).sum::<f64>() / n;
    Some((rr1, rr3, reg))
}

fn summarise_method(groups: &[&[&CellResult]], m: Method) -> (usize, Option<Summary>, Option<Summary>, Option<Summary>) {
    let means: Vec<(f64, Option<f64>, f64)> =
        groups.iter().filter_map(|g| realisation_means(g, m)).collect();
    let rr1: Vec<f64> = means.iter().map(|x| x.0).collect();
    let rr3: Vec<f64> = means.iter().filter_map(|x| x.1).collect();
    let reg: Vec<f64> = means.iter().map(|x| x.2).collect();
    (
        means.len(),
        Summary::from_samples(&rr1),
        Summary::from_samples(&rr3),
        Summary::from_samples(&reg),
    )
}

fn aggregate(cells: &[CellResult], cfg: &CVConfig, em: &ExperimentMap) -> Vec<AggregateRow> {
    let groups = realisation_groups(cells, em);
    let mut rows = Vec::new();
    let mut all_ok: Vec<&[&CellResult]> = Vec::new();
    for &s in &cfg.sparsity_levels {
        let ok: Vec<&[&CellResult]> = groups
            .iter()
            .filter(|g| g.0 == s)
            .filter_map(|g| g.2.as_deref())
            .collect();
        for m in [Method::Pop, Method::Mc, Method::Rs] {
            let (n, mrr1, mrr3, regret) = summarise_method(&ok, m);
            rows.push(AggregateRow {
                sparsity: Some(s),
                method: m,
                n_realisations: n,
                mrr1,
                mrr3,
                regret,
            });
        }
        all_ok.extend(ok);
    }
    for m in [Method::Reference, Method::Random] {
        let (n, mrr1, mrr3, regret) = summarise_method(&all_ok, m);
        rows.push(AggregateRow {
            sparsity: None,
            method: m,
            n_realisations: n,
            mrr1,
            mrr3,
            regret,
        });
    }
    rows
}

fn experiment_rows(cells: &[CellResult], cfg: &CVConfig, em: &ExperimentMap) -> Vec<ExperimentRow> {
    let configs = cfg.grid.configs();
    let mut rows = Vec::new();
    for &s in &cfg.sparsity_levels {
        for e in em.experiment_ids() {
            let ok: Vec<&CellResult> = cells
                .iter()
                .filter(|c| c.sparsity == s && &c.test_experiment == e && c.error.is_none())
                .collect();
            if ok.is_empty() {
                continue;
            }
            let mut counts = vec![0usize; configs.len()];
            for c in &ok {
                if let Some(i) = configs
                    .iter()
                    .position(|x| Some(x.0) == c.chosen_metric && Some(x.1) == c.chosen_k)
                {
                    counts[i] += 1;
                }
            }
            let mut modal = 0;
            for (i, n) in counts.iter().enumerate() {
                if *n > counts[modal] {
                    modal = i;
                }
            }
            let rs: Vec<&MethodScore> = ok.iter().filter_map(|c| c.score(Method::Rs)).collect();
            let n = ok.len() as f64;
            let summary = |v: Vec<f64>| Summary::from_samples(&v).expect("nonempty");
            rows.push(ExperimentRow {
                sparsity: s,
                test_experiment: e.clone(),
                metric: configs[modal].0,
                k: configs[modal].1,
                val_rr1: ok.iter().filter_map(|c| c.val_mrr1).sum::<f64>() / n,
                val_rr3: ok.iter().filter_map(|c| c.val_mrr3).sum::<f64>() / n,
                test_rr1: summary(rs.iter().map(|x| x.rr1).collect()),
                test_rr3: summary(rs.iter().filter_map(|x| x.rr3).collect()),
                test_regret: summary(rs.iter().map(|x| x.regret).collect()),
            });
        }
    }
    rows
}

fn random_expectation(
    truth: &PerformanceMatrix,
    em: &ExperimentMap,
    threshold: f64,
) -> Result<RandomExpectation> {
    let mut counts = Vec::with_capacity(truth.n_cases());
    let mut regrets = Vec::with_capacity(truth.n_cases());
    for case in truth.case_ids() {
        let column = truth_column(truth, case)?;
        let rel: RelevanceSet = relevant_items(case, &column, threshold)?;
        counts.push((case.clone(), rel.len()));
        regrets.push((case.clone(), expected_random_regret(&column)));
    }
    let n = truth.n_items();
    Ok(RandomExpectation {
        mrr1: expected_random_rr(&counts, n, 1, em)?,
        mrr3: expected_random_rr(&counts, n, 3, em)?,
        regret: crate::eval::experiment_balanced_mean(&regrets, em)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::CaseFeatures;
    use crate::synth::{generate_synthetic, SynthConfig};
    use crate::testutil::ids;

    fn ones(n_items: usize, n_cases: usize) -> PerformanceMatrix {
        PerformanceMatrix::from_dense(
            ids("i", n_items),
            ids("c", n_cases),
            vec![vec![1.0; n_cases]; n_items],
        )
        .unwrap()
    }

    #[test]
    fn sparsify_counts_and_determinism() {
        let m = ones(10, 7);
        assert_eq!(sparsify(&m, 0.0, 1).unwrap(), m);
        for s in [0.25, 0.5, 0.75, 0.9] {
            let sp = sparsify(&m, s, 3).unwrap();
            assert_eq!(70 - sp.observed_count(), (s * 70.0f64).round() as usize);
            assert_eq!(sp, sparsify(&m, s, 3).unwrap());
        }
        let masks: BTreeSet<Vec<bool>> = (0..3)
            .map(|seed| {
                let sp = sparsify(&m, 0.5, seed).unwrap();
                sp.rows().iter().flatten().map(Option::is_some).collect()
            })
            .collect();
        assert_eq!(masks.len(), 3);
        assert!(sparsify(&m, 1.0, 0).is_err());
        assert!(sparsify(&sparsify(&m, 0.5, 0).unwrap(), 0.1, 0).is_err());
    }

    #[test]
    fn grid_has_27_configs_in_tie_break_order() {
        let g = HyperGrid::default();
        let c = g.configs();
        assert_eq!(c.len(), 27);
        assert_eq!(c[0], (DistanceMetric::Euclidean, 1));
        assert_eq!(c[1], (DistanceMetric::Cosine, 1));
        assert_eq!(c[3], (DistanceMetric::Euclidean, 2));
    }

    fn tiny_bundle(constant: bool) -> (PerformanceMatrix, CaseFeatureTable, FeatureSchema, ExperimentMap) {
        let cfg = SynthConfig {
            n_items: 5,
            n_cases: 12,
            n_experiments: 4,
            noise_sd: 0.0,
            ..SynthConfig::default()
        };
        let b = generate_synthetic(&cfg).unwrap().bundle;
        let m = if constant {
            PerformanceMatrix::from_dense(
                b.matrix.item_ids().to_vec(),
                b.matrix.case_ids().to_vec(),
                vec![vec![0.5; 12]; 5],
            )
            .unwrap()
        } else {
            b.matrix
        };
        (m, b.features, b.schema, b.experiments)
    }

    fn small_cfg() -> CVConfig {
        CVConfig {
            sparsity_levels: vec![0.25],
            n_realisations: 1,
            grid: HyperGrid {
                metrics: DistanceMetric::ALL.to_vec(),
                k_values: vec![1, 3],
            },
            ..CVConfig::default()
        }
    }

    #[test]
    fn constant_matrix_selects_smallest_k_euclidean() {
        let (m, f, s, em) = tiny_bundle(true);
        let res = inner_cv(&sparsify(&m, 0.25, 0).unwrap(), &m, &f, &s, &em, &small_cfg()).unwrap();
        assert_eq!((res.best_metric, res.best_k), (DistanceMetric::Euclidean, 1));
        assert_eq!(res.table.len(), 6);
    }

    #[test]
    fn single_config_grid() {
        let (m, f, s, em) = tiny_bundle(false);
        let cfg = CVConfig {
            grid: HyperGrid {
                metrics: vec![DistanceMetric::Gower],
                k_values: vec![2],
            },
            ..small_cfg()
        };
        let res = inner_cv(&m, &m, &f, &s, &em, &cfg).unwrap();
        assert_eq!((res.best_metric, res.best_k), (DistanceMetric::Gower, 2));
        assert_eq!(res.table.len(), 1);
    }

    #[test]
    fn inner_cv_needs_two_experiments() {
        let (m, f, s, em) = tiny_bundle(false);
        let keep: Vec<usize> = em.cases_of("exp_00").iter().map(|c| m.case_index(c).unwrap()).collect();
        let one = m.select_cases(&keep);
        let em1 = ExperimentMap::from_pairs(one.case_ids().iter().map(|c| (c.clone(), "exp_00".to_string()))).unwrap();
        assert!(inner_cv(&one, &one, &f, &s, &em1, &small_cfg()).is_err());
    }

    #[test]
    fn nested_cv_shape_and_audit() {
        let (m, f, s, em) = tiny_bundle(false);
        let cfg = CVConfig {
            sparsity_levels: vec![0.0, 0.5],
            n_realisations: 2,
            ..small_cfg()
        };
        let rep = run_nested_cv(&m, &f, &s, &em, Some(m.item_ids()[0].as_str()), &cfg).unwrap();
        assert_eq!(rep.cells.len(), 2 * 2 * 4);
        let triples: BTreeSet<(u64, usize, String)> = rep
            .cells
            .iter()
            .map(|c| (c.sparsity.to_bits(), c.realisation, c.test_experiment.clone()))
            .collect();
        assert_eq!(triples.len(), rep.cells.len());
        assert!(rep.leakage_audit);
        for c in &rep.cells {
            assert!(c.error.is_none(), "{:?}", c.error);
            let o = c.score(Method::Oracle).unwrap();
            assert_eq!((o.rr1, o.regret), (1.0, 0.0));
        }
        assert_eq!(rep.aggregates.len(), 2 * 3 + 2);
        assert_eq!(rep.experiments.len(), 2 * 4);

        let leaky = run_nested_cv_without_test_drop(&m, &f, &s, &em, None, &cfg).unwrap();
        assert!(!leaky.leakage_audit);
        assert!(leaky.cells.iter().all(|c| !c.audit_passed));
    }

    #[test]
    fn audit_ignores_feature_reads() {
        let em = ExperimentMap::from_pairs([("a", "e1"), ("b", "e2")]).unwrap();
        let mut t = AccessTrace::new("e1");
        t.performance_cases.insert("b".into());
        assert!(leakage_audit(&t, &em, "e1"));
        t.performance_cases.insert("a".into());
        assert!(!leakage_audit(&t, &em, "e1"));
    }

    #[test]
    fn duplicated_query_gets_its_own_argmax() {
        // the query case has an exact feature twin in history at s = 0, k = 1
        let schema = FeatureSchema {
            categorical: vec![],
            continuous: vec![crate::features::ContinuousFeature {
                name: "x".into(),
                min: 0.0,
                max: 1.0,
            }],
        };
        let feats = CaseFeatureTable::new(
            [("q", 0.3), ("twin", 0.3), ("far", 0.9)]
                .iter()
                .map(|(c, x)| CaseFeatures::new(*c).with_continuous("x", *x))
                .collect(),
        );
        let hist = PerformanceMatrix::from_dense(
            ids("i", 3),
            vec!["twin".into(), "far".into()],
            vec![vec![0.1, 0.9], vec![0.8, 0.2], vec![0.4, 0.4]],
        )
        .unwrap();
        let candidates = feats.select(["twin", "far"]).unwrap();
        let order = ranked_candidates(feats.get("q").unwrap(), &candidates, DistanceMetric::Euclidean, &schema).unwrap();
        let res = score_items("q", &[order[0].0.clone()], &hist, &hist).unwrap();
        assert_eq!(res.top(), "i01");
    }

    #[test]
    fn seeds_are_hierarchical_and_stable() {
        assert_eq!(realisation_seed(5, 0.5, 3), realisation_seed(5, 0.5, 3));
        assert_ne!(realisation_seed(5, 0.5, 3), realisation_seed(5, 0.5, 4));
        assert_ne!(realisation_seed(5, 0.5, 3), realisation_seed(5, 0.75, 3));
        assert_eq!(fnv1a(""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a("a"), 0xaf63_dc4c_8601_ec8c);
    }
}
