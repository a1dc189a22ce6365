//! On-disk formats.
//!
//! A bundle is a matrix CSV (first row case ids, first column item ids,
//! empty cell = missing) plus one JSON document holding the feature schema,
//! case features, experiment grouping and optional reference item.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{validate_matrix, ExperimentMap, PerformanceMatrix};
use crate::error::{Error, Result};
use crate::features::{CaseFeatureTable, CaseFeatures, FeatureSchema};
use crate::protocol::{realisation_seed, CVReport, Summary};

pub const MATRIX_FILE: &str = "matrix.csv";
pub const METADATA_FILE: &str = "bundle.json";

/// Everything needed to evaluate or query the recommender.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub matrix: PerformanceMatrix,
    pub features: CaseFeatureTable,
    pub schema: FeatureSchema,
    pub experiments: ExperimentMap,
    pub reference_item: Option<String>,
}

impl DatasetBundle {
    /// Cross-checks ids between the parts.
    pub fn new(
        matrix: PerformanceMatrix,
        features: CaseFeatureTable,
        schema: FeatureSchema,
        experiments: ExperimentMap,
        reference_item: Option<String>,
    ) -> Result<Self> {
        let report = validate_matrix(&matrix);
        if !report.ok {
            let msg: Vec<String> = report.issues.iter().map(|(l, m)| format!("{l}: {m}")).collect();
            return Err(Error::invalid(msg.join("; ")));
        }
        schema.validate()?;
        let mut seen = HashSet::new();
        for f in &features.cases {
            if !seen.insert(f.case_id.as_str()) {
                return Err(Error::invalid(format!("features list case `{}` twice", f.case_id)));
            }
            schema.check(f)?;
        }
        let missing: Vec<&str> = matrix
            .case_ids()
            .iter()
            .map(String::as_str)
            .filter(|c| !seen.contains(c))
            .collect();
        if !missing.is_empty() {
            return Err(Error::invalid(format!(
                "cases without features: {}",
                missing.join(", ")
            )));
        }
        experiments.check_covers(&matrix)?;
        if let Some(r) = &reference_item {
            if matrix.item_index(r).is_none() {
                return Err(Error::UnknownItem(r.clone()));
            }
        }
        Ok(Self {
            matrix,
            features,
            schema,
            experiments,
            reference_item,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ExperimentEntry {
    id: String,
    cases: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BundleMetadata {
    schema: FeatureSchema,
    cases: Vec<CaseFeatures>,
    experiments: Vec<ExperimentEntry>,
    #[serde(default)]
    reference_item: Option<String>,
}

fn parse_err(path: &Path, line: Option<u64>, column: Option<usize>, message: impl Into<String>) -> Error {
    let mut location = path.display().to_string();
    if let Some(l) = line {
        let _ = write!(location, ":{l}");
        if let Some(c) = column {
            let _ = write!(location, ":{c}");
        }
    }
    Error::Parse {
        location,
        message: message.into(),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses a matrix CSV. Line and column numbers in errors are 1-based.
pub fn parse_matrix_csv(text: &str, origin: &Path) -> Result<PerformanceMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut records = reader.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| parse_err(origin, Some(1), None, e.to_string()))?,
        None => return Err(parse_err(origin, None, None, "empty file")),
    };
    let case_ids: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
    let mut item_ids = Vec::new();
    let mut rows = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line());
            parse_err(origin, line, None, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line());
        if rec.len() != case_ids.len() + 1 {
            return Err(parse_err(
                origin,
                line,
                None,
                format!("expected {} fields, found {}", case_ids.len() + 1, rec.len()),
            ));
        }
        item_ids.push(rec[0].trim().to_string());
        let mut row = Vec::with_capacity(case_ids.len());
        for (j, cell) in rec.iter().enumerate().skip(1) {
            let cell = cell.trim();
            if cell.is_empty() {
                row.push(None);
            } else {
                let v: f64 = cell.parse().map_err(|_| {
                    parse_err(origin, line, Some(j + 1), format!("not a number: `{cell}`"))
                })?;
                row.push(Some(v));
            }
        }
        rows.push(row);
    }
    PerformanceMatrix::new(item_ids, case_ids, rows)
}

pub fn read_matrix_csv(path: &Path) -> Result<PerformanceMatrix> {
    parse_matrix_csv(&read_text(path)?, path)
}

/// Serialises a matrix with shortest round-trip float formatting.
pub fn matrix_to_csv(m: &PerformanceMatrix) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["item".to_string()];
    header.extend(m.case_ids().iter().cloned());
    w.write_record(&header).expect("in-memory write");
    for (i, item) in m.item_ids().iter().enumerate() {
        let mut rec = vec![item.clone()];
        rec.extend(m.rows()[i].iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()));
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

pub fn write_matrix_csv(m: &PerformanceMatrix, path: &Path) -> Result<()> {
    write_text(path, &matrix_to_csv(m))
}

fn parse_json<T: for<'de> Deserialize<'de>>(text: &str, origin: &Path) -> Result<T> {
    serde_json::from_str(text).map_err(|e| {
        parse_err(origin, Some(e.line() as u64), Some(e.column()), e.to_string())
    })
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    parse_json(&read_text(path)?, path)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::invalid(format!("serialisation failed: {e}")))?;
    text.push('\n');
    write_text(path, &text)
}

/// Loads `matrix.csv` and `bundle.json` from `dir`.
pub fn load_bundle(dir: &Path) -> Result<DatasetBundle> {
    load_bundle_files(&dir.join(MATRIX_FILE), &dir.join(METADATA_FILE))
}

pub fn load_bundle_files(matrix_path: &Path, metadata_path: &Path) -> Result<DatasetBundle> {
    let matrix = read_matrix_csv(matrix_path)?;
    let meta: BundleMetadata = read_json(metadata_path)?;
    let mut assignments = BTreeMap::new();
    let mut order = Vec::with_capacity(meta.experiments.len());
    for e in meta.experiments {
        for c in e.cases {
            if let Some(prev) = assignments.insert(c.clone(), e.id.clone()) {
                return Err(Error::invalid(format!(
                    "case `{c}` listed under experiments `{prev}` and `{}`",
                    e.id
                )));
            }
        }
        order.push(e.id);
    }
    let experiments = ExperimentMap::new(assignments, Some(order))?;
    DatasetBundle::new(
        matrix,
        CaseFeatureTable::new(meta.cases),
        meta.schema,
        experiments,
        meta.reference_item,
    )
}

fn metadata_of(b: &DatasetBundle) -> BundleMetadata {
    BundleMetadata {
        schema: b.schema.clone(),
        cases: b.features.cases.clone(),
        experiments: b
            .experiments
            .experiment_ids()
            .iter()
            .map(|e| ExperimentEntry {
                id: e.clone(),
                cases: b.experiments.cases_of(e).into_iter().map(String::from).collect(),
            })
            .collect(),
        reference_item: b.reference_item.clone(),
    }
}

/// Writes `matrix.csv` and `bundle.json` into `dir`, creating it if needed.
pub fn save_bundle(b: &DatasetBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_matrix_csv(&b.matrix, &dir.join(MATRIX_FILE))?;
    write_json(&metadata_of(b), &dir.join(METADATA_FILE))
}

/// Profiles CSV: each row is `id,v1,v2,...`; rows may differ in length.
pub fn read_profiles_csv(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let text = read_text(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| parse_err(path, e.position().map(|p| p.line()), None, e.to_string()))?;
        let line = rec.position().map(|p| p.line());
        if rec.len() < 2 {
            return Err(parse_err(path, line, None, "row needs an id and at least one value"));
        }
        let values = rec
            .iter()
            .enumerate()
            .skip(1)
            .map(|(j, s)| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| parse_err(path, line, Some(j + 1), format!("not a number: `{}`", s.trim())))
            })
            .collect::<Result<Vec<f64>>>()?;
        out.push((rec[0].trim().to_string(), values));
    }
    Ok(out)
}

/// Rankings CSV: each row is `case_id,item1,item2,...`, best first.
pub fn read_rankings_csv(path: &Path) -> Result<Vec<(String, Vec<String>)>> {
    let text = read_text(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| parse_err(path, e.position().map(|p| p.line()), None, e.to_string()))?;
        if rec.len() < 2 {
            let line = rec.position().map(|p| p.line());
            return Err(parse_err(path, line, None, "row needs a case id and at least one item"));
        }
        out.push((
            rec[0].trim().to_string(),
            rec.iter().skip(1).map(|s| s.trim().to_string()).collect(),
        ));
    }
    Ok(out)
}

pub const CELLS_FILE: &str = "cells.csv";
pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const EXPERIMENTS_FILE: &str = "experiments.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn summary_fields(s: Option<&Summary>) -> [String; 3] {
    match s {
        Some(s) => [s.mean.to_string(), opt(s.ci_low), opt(s.ci_high)],
        None => Default::default(),
    }
}

fn to_csv(header: &[&str], rows: Vec<Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

pub const CELLS_HEADER: [&str; 12] = [
    "sparsity", "realisation", "test_experiment", "method", "metric", "k", "rr@1", "rr@3",
    "regret", "val_mrr@3", "leakage_audit", "status",
];

/// One row per (sparsity, realisation, test experiment, method). Failed
/// cells get a single row carrying the error.
pub fn cells_csv(report: &CVReport) -> String {
    let mut rows = Vec::new();
    for c in &report.cells {
        let metric = c.chosen_metric.map(|m| m.to_string()).unwrap_or_default();
        let k = c.chosen_k.map(|k| k.to_string()).unwrap_or_default();
        let base = |method: String| {
            vec![
                c.sparsity.to_string(),
                c.realisation.to_string(),
                c.test_experiment.clone(),
                method,
                metric.clone(),
                k.clone(),
            ]
        };
        let tail = |status: String| vec![opt(c.val_mrr3), c.audit_passed.to_string(), status];
        match &c.error {
            Some(e) => {
                let mut r = base(String::new());
                r.extend([String::new(), String::new(), String::new()]);
                r.extend(tail(format!("failed: {e}")));
                rows.push(r);
            }
            None => {
                for s in &c.scores {
                    let mut r = base(s.method.to_string());
                    r.extend([s.rr1.to_string(), opt(s.rr3), s.regret.to_string()]);
                    r.extend(tail("ok".to_string()));
                    rows.push(r);
                }
            }
        }
    }
    to_csv(&CELLS_HEADER, rows)
}

pub const AGGREGATE_HEADER: [&str; 12] = [
    "sparsity", "method", "n_realisations", "mrr@1", "mrr@1_ci_low", "mrr@1_ci_high", "mrr@3",
    "mrr@3_ci_low", "mrr@3_ci_high", "regret", "regret_ci_low", "regret_ci_high",
];

/// One row per (sparsity, Pop/MC/RS), then the sparsity-independent
/// Reference and Random rows with sparsity `all`.
pub fn aggregate_csv(report: &CVReport) -> String {
    let rows = report
        .aggregates
        .iter()
        .map(|a| {
            let mut r = vec![
                a.sparsity.map_or("all".to_string(), |s| s.to_string()),
                a.method.to_string(),
                a.n_realisations.to_string(),
            ];
            r.extend(summary_fields(a.mrr1.as_ref()));
            r.extend(summary_fields(a.mrr3.as_ref()));
            r.extend(summary_fields(a.regret.as_ref()));
            r
        })
        .collect();
    to_csv(&AGGREGATE_HEADER, rows)
}

pub const EXPERIMENTS_HEADER: [&str; 15] = [
    "sparsity", "test_experiment", "metric", "k", "rr@3_val", "rr@3_test", "rr@3_test_ci_low",
    "rr@3_test_ci_high", "rr@1_val", "rr@1_test", "rr@1_test_ci_low", "rr@1_test_ci_high",
    "regret_test", "regret_test_ci_low", "regret_test_ci_high",
];

/// Per test experiment: selected configuration, validation and test RR.
pub fn experiments_csv(report: &CVReport) -> String {
    let rows = report
        .experiments
        .iter()
        .map(|e| {
            let mut r = vec![
                e.sparsity.to_string(),
                e.test_experiment.clone(),
                e.metric.to_string(),
                e.k.to_string(),
                e.val_rr3.to_string(),
            ];
            r.extend(summary_fields(Some(&e.test_rr3)));
            r.push(e.val_rr1.to_string());
            r.extend(summary_fields(Some(&e.test_rr1)));
            r.extend(summary_fields(Some(&e.test_regret)));
            r
        })
        .collect();
    to_csv(&EXPERIMENTS_HEADER, rows)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedRecord {
    pub sparsity: f64,
    pub realisation: usize,
    pub seed: u64,
}

/// Run manifest: everything needed to regenerate the report files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub config: crate::protocol::CVConfig,
    pub grid_size: usize,
    pub ci_method: String,
    pub input_hash: Option<String>,
    pub seeds: Vec<SeedRecord>,
    pub random_expectation: crate::protocol::RandomExpectation,
    pub leakage_audit: bool,
    pub failed_cells: usize,
}

impl RunManifest {
    pub fn for_report(report: &CVReport, input_hash: Option<u64>) -> Self {
        let cfg = &report.config;
        let seeds = cfg
            .sparsity_levels
            .iter()
            .flat_map(|&s| {
                (0..cfg.n_realisations).map(move |r| SeedRecord {
                    sparsity: s,
                    realisation: r,
                    seed: realisation_seed(cfg.rng_seed, s, r),
                })
            })
            .collect();
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: cfg.clone(),
            grid_size: report.grid_size,
            ci_method: "normal approximation, 95%, over realisations".to_string(),
            input_hash: input_hash.map(|h| format!("{h:016x}")),
            seeds,
            random_expectation: report.random_expectation,
            leakage_audit: report.leakage_audit,
            failed_cells: report.cells.iter().filter(|c| c.error.is_some()).count(),
        }
    }
}

/// Writes the three report CSVs and the manifest into `dir`.
pub fn save_report(report: &CVReport, dir: &Path, input_hash: Option<u64>) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = [
        (CELLS_FILE, cells_csv(report)),
        (AGGREGATE_FILE, aggregate_csv(report)),
        (EXPERIMENTS_FILE, experiments_csv(report)),
    ];
    let mut written = Vec::new();
    for (name, body) in files {
        let p = dir.join(name);
        write_text(&p, &body)?;
        written.push(p);
    }
    let p = dir.join(MANIFEST_FILE);
    write_json(&RunManifest::for_report(report, input_hash), &p)?;
    written.push(p);
    Ok(written)
}
