use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use coldrec::completion::{complete, CompletionConfig, CompletionMethod};
use coldrec::eval::{mrr, regret, relevant_items, rr_at_k, DEFAULT_RELEVANCE_THRESHOLD};
use coldrec::io::{
    load_bundle, read_json, read_matrix_csv, read_profiles_csv, read_rankings_csv, save_bundle,
    save_report, write_json, write_matrix_csv,
};
use coldrec::protocol::{run_nested_cv, sparsify, CVConfig};
use coldrec::recommend::hybrid_recommend;
use coldrec::stability::{detect_staggering, Profile, StaggerConfig};
use coldrec::synth::{generate_synthetic, SynthConfig};
use coldrec::{CaseFeatures, DistanceMetric, Error};

#[derive(Parser)]
#[command(name = "coldrec", version, about = "Cold-start recommendation of closure-model combinations")]
struct Cli {
    /// Master seed; overrides the seed in --config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON configuration for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for the evaluation loop.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Nested cross-validation of the recommender and baselines.
    Evaluate(EvaluateArgs),
    /// Rank items for a new case described by a features JSON.
    Recommend(RecommendArgs),
    /// Impute the missing entries of a matrix CSV.
    Complete(CompleteArgs),
    /// Flag oscillating solution profiles.
    DetectStagger(StaggerArgs),
    /// Write a synthetic bundle.
    Synth(SynthArgs),
    /// Score a rankings file against a bundle's ground truth.
    Metrics(MetricsArgs),
}

#[derive(Args)]
struct EvaluateArgs {
    /// Bundle directory (matrix.csv + bundle.json).
    #[arg(long)]
    bundle: PathBuf,
    /// Output directory for the report.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated sparsity levels.
    #[arg(long, value_delimiter = ',')]
    sparsity: Option<Vec<f64>>,
    #[arg(long)]
    realisations: Option<usize>,
}

#[derive(Args)]
struct RecommendArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// Features of the query case.
    #[arg(long)]
    query: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = DistanceMetric::Cosine)]
    metric: DistanceMetric,
    /// Hide this fraction of the history before recommending.
    #[arg(long, default_value_t = 0.0)]
    sparsity: f64,
}

#[derive(Args)]
struct CompleteArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_method)]
    method: Option<CompletionMethod>,
    #[arg(long)]
    rank: Option<usize>,
}

#[derive(Args)]
struct StaggerArgs {
    /// CSV with one `id,v1,v2,...` profile per row.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    min_changes: Option<usize>,
    #[arg(long)]
    amplitude_fraction: Option<f64>,
    /// Report every row instead of OR-combining rows that share an id.
    #[arg(long)]
    per_row: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n_items: Option<usize>,
    #[arg(long)]
    n_cases: Option<usize>,
    #[arg(long)]
    n_experiments: Option<usize>,
    #[arg(long)]
    n_clusters: Option<usize>,
    #[arg(long)]
    noise_sd: Option<f64>,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// CSV with one `case_id,item1,item2,...` ranking per row, best first.
    #[arg(long)]
    rankings: PathBuf,
    #[arg(long, default_value_t = DEFAULT_RELEVANCE_THRESHOLD)]
    threshold: f64,
}

fn parse_method(s: &str) -> Result<CompletionMethod, String> {
    match s {
        "copula" => Ok(CompletionMethod::Copula),
        "soft-impute" | "soft_impute" => Ok(CompletionMethod::SoftImpute),
        _ => Err(format!("unknown method `{s}` (copula, soft-impute)")),
    }
}

struct Failure {
    code: u8,
    message: String,
}

fn data(e: Error) -> Failure {
    Failure {
        code: 2,
        message: e.to_string(),
    }
}

fn runtime(e: Error) -> Failure {
    Failure {
        code: 3,
        message: e.to_string(),
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Reads `--config`; a nested `key` object is used when present, so a run
/// manifest or a full evaluation config can be passed to any subcommand.
fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>, key: &str) -> CliResult<T> {
    let Some(p) = path else {
        return Ok(T::default());
    };
    let v: Value = read_json(p).map_err(data)?;
    let v = match v.get(key) {
        Some(inner) if inner.is_object() => inner.clone(),
        _ => v,
    };
    serde_json::from_value(v).map_err(|e| Failure {
        code: 2,
        message: format!("invalid config {}: {e}", p.display()),
    })
}

fn print_json(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("serialisable"));
}

fn evaluate(cli: &Cli, a: &EvaluateArgs) -> CliResult<()> {
    let mut cfg: CVConfig = load_config(cli.config.as_deref(), "config")?;
    if let Some(s) = cli.seed {
        cfg.rng_seed = s;
    }
    if let Some(s) = &a.sparsity {
        cfg.sparsity_levels = s.clone();
    }
    if let Some(r) = a.realisations {
        cfg.n_realisations = r;
    }
    cfg.validate().map_err(data)?;
    let b = load_bundle(&a.bundle).map_err(data)?;
    let report = run_nested_cv(
        &b.matrix,
        &b.features,
        &b.schema,
        &b.experiments,
        b.reference_item.as_deref(),
        &cfg,
    )
    .map_err(runtime)?;
    let files = save_report(&report, &a.out, Some(b.matrix.content_hash())).map_err(runtime)?;
    for f in files {
        println!("{}", f.display());
    }
    if !report.leakage_audit {
        return Err(Failure {
            code: 3,
            message: "leakage audit failed".into(),
        });
    }
    Ok(())
}

fn recommend(cli: &Cli, a: &RecommendArgs) -> CliResult<()> {
    let mut cfg: CompletionConfig = load_config(cli.config.as_deref(), "completion")?;
    if let Some(s) = cli.seed {
        cfg.rng_seed = s;
    }
    let b = load_bundle(&a.bundle).map_err(data)?;
    let q: CaseFeatures = read_json(&a.query).map_err(data)?;
    b.schema.check(&q).map_err(data)?;
    // a query that is already in the bundle is treated as unseen
    let drop: HashSet<&str> = [q.case_id.as_str()].into_iter().collect();
    let mut history = b.matrix.without_cases(&drop);
    if a.sparsity > 0.0 {
        let seed = cli.seed.unwrap_or(0);
        history = sparsify(&history, a.sparsity, seed).map_err(data)?;
    }
    let completed = complete(&history, &cfg).map_err(runtime)?.matrix;
    let res = hybrid_recommend(&q, &history, &b.features, &completed, a.k, a.metric, &b.schema)
        .map_err(runtime)?;
    print_json(&serde_json::to_value(&res).expect("serialisable"));
    Ok(())
}

fn complete_cmd(cli: &Cli, a: &CompleteArgs) -> CliResult<()> {
    let mut cfg: CompletionConfig = load_config(cli.config.as_deref(), "completion")?;
    if let Some(s) = cli.seed {
        cfg.rng_seed = s;
    }
    if let Some(m) = a.method {
        cfg.method = m;
    }
    if let Some(r) = a.rank {
        cfg.rank = r;
    }
    cfg.validate().map_err(data)?;
    let m = read_matrix_csv(&a.input).map_err(data)?;
    let done = complete(&m, &cfg).map_err(runtime)?;
    if !done.converged {
        log::warn!("completion did not converge in {} iterations", done.iterations);
    }
    write_matrix_csv(&done.matrix, &a.out).map_err(runtime)
}

fn detect_stagger(cli: &Cli, a: &StaggerArgs) -> CliResult<()> {
    let mut cfg: StaggerConfig = load_config(cli.config.as_deref(), "stagger")?;
    if let Some(n) = a.min_changes {
        cfg.min_changes = n;
    }
    if let Some(f) = a.amplitude_fraction {
        cfg.amplitude_fraction = f;
    }
    let rows = read_profiles_csv(&a.input).map_err(data)?;
    let mut order = Vec::new();
    let mut combined: BTreeMap<String, bool> = BTreeMap::new();
    for (id, values) in rows {
        let flag = detect_staggering(&Profile::new(values), &cfg)
            .map_err(|e| data(Error::InvalidInput(format!("profile `{id}`: {e}"))))?;
        if a.per_row {
            println!("{id},{flag}");
        } else {
            if !combined.contains_key(&id) {
                order.push(id.clone());
            }
            *combined.entry(id).or_insert(false) |= flag;
        }
    }
    for id in order {
        println!("{id},{}", combined[&id]);
    }
    Ok(())
}

fn synth(cli: &Cli, a: &SynthArgs) -> CliResult<()> {
    let mut cfg: SynthConfig = load_config(cli.config.as_deref(), "synth")?;
    if let Some(s) = cli.seed {
        cfg.rng_seed = s;
    }
    let overrides = [
        (&mut cfg.n_items, a.n_items),
        (&mut cfg.n_cases, a.n_cases),
        (&mut cfg.n_experiments, a.n_experiments),
        (&mut cfg.n_clusters, a.n_clusters),
    ];
    for (slot, v) in overrides {
        if let Some(v) = v {
            *slot = v;
        }
    }
    if let Some(n) = a.noise_sd {
        cfg.noise_sd = n;
    }
    let s = generate_synthetic(&cfg).map_err(data)?;
    save_bundle(&s.bundle, &a.out).map_err(runtime)?;
    write_json(
        &json!({ "config": cfg, "truth": s.truth }),
        &a.out.join("truth.json"),
    )
    .map_err(runtime)?;
    if let Some(p) = &s.preview {
        write_matrix_csv(p, &a.out.join("matrix_sparse.csv")).map_err(runtime)?;
    }
    println!("{}", a.out.display());
    Ok(())
}

fn metrics(a: &MetricsArgs) -> CliResult<()> {
    let b = load_bundle(&a.bundle).map_err(data)?;
    let rankings = read_rankings_csv(&a.rankings).map_err(data)?;
    let m = &b.matrix;
    let mut per_case = Vec::new();
    let mut by_exp: BTreeMap<String, Vec<(f64, f64, f64)>> = BTreeMap::new();
    for (case, ranking) in &rankings {
        let j = m.case_index(case).ok_or_else(|| data(Error::UnknownCase(case.clone())))?;
        let column: Vec<(String, f64)> = m
            .item_ids()
            .iter()
            .enumerate()
            .map(|(i, item)| {
                m.get(i, j).map(|v| (item.clone(), v)).ok_or_else(|| {
                    data(Error::InvalidInput(format!("ground truth missing ({item}, {case})")))
                })
            })
            .collect::<CliResult<_>>()?;
        for item in ranking {
            if m.item_index(item).is_none() {
                return Err(data(Error::UnknownItem(item.clone())));
            }
        }
        let rel = relevant_items(case, &column, a.threshold).map_err(data)?;
        let rr1 = rr_at_k(ranking, &rel, 1).map_err(data)?;
        let rr3 = rr_at_k(ranking, &rel, 3).map_err(data)?;
        let reg = regret(&column, &ranking[0]).map_err(data)?;
        let e = b.experiments.experiment_of(case).expect("bundle is consistent");
        by_exp.entry(e.to_string()).or_default().push((rr1, rr3, reg));
        per_case.push(json!({ "case_id": case, "experiment": e, "rr@1": rr1, "rr@3": rr3, "regret": reg }));
    }
    if per_case.is_empty() {
        return Err(data(Error::InvalidInput("rankings file is empty".into())));
    }
    let exp_means: Vec<(f64, f64, f64)> = by_exp
        .values()
        .map(|v| {
            let n = v.len() as f64;
            (
                v.iter().map(|x| x.0).sum::<f64>() / n,
                v.iter().map(|x| x.1).sum::<f64>() / n,
                v.iter().map(|x| x.2).sum::<f64>() / n,
            )
        })
        .collect();
    let pick = |f: fn(&(f64, f64, f64)) -> f64| mrr(&exp_means.iter().map(f).collect::<Vec<_>>());
    print_json(&json!({
        "mrr@1": pick(|x| x.0).map_err(runtime)?,
        "mrr@3": pick(|x| x.1).map_err(runtime)?,
        "regret": pick(|x| x.2).map_err(runtime)?,
        "n_experiments": exp_means.len(),
        "cases": per_case,
    }));
    Ok(())
}

fn run(cli: &Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure {
                code: 1,
                message: "--threads must be positive".into(),
            });
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure {
                code: 3,
                message: format!("thread pool: {e}"),
            })?;
    }
    match &cli.command {
        Command::Evaluate(a) => evaluate(cli, a),
        Command::Recommend(a) => recommend(cli, a),
        Command::Complete(a) => complete_cmd(cli, a),
        Command::DetectStagger(a) => detect_stagger(cli, a),
        Command::Synth(a) => synth(cli, a),
        Command::Metrics(a) => metrics(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
