use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use tracing::info;
use tracing_subscriber::EnvFilter;

use decaf_core::analysis::{self, ReportFormat};
use decaf_core::corpus::{load_tasks, RunManifest, RunStore, TaskSet};
use decaf_core::generation::{GeneratorConfig, GEN_ENDPOINT_ENV};
use decaf_core::metrics::{exact_match, source_edit_distance, wildcard_levenshtein};
use decaf_core::pipeline::{build_generator, derived_run_id, manifest_policies, Phase, Pipeline, PipelineError, RunOptions};
use decaf_core::rerank::{PolicyId, ScorerConfig, SCORER_ENDPOINT_ENV};
use decaf_core::sandbox::SandboxLimits;
use decaf_core::toolchain::{self, CompilerProfile};

#[derive(Parser)]
#[command(name = "decaf", version, about = "Sample, recompile, execute and rerank candidate decompilations")]
struct Cli {
    /// Run store directory.
    #[arg(long, global = true, default_value = "runs")]
    store: PathBuf,
    /// More log output (-v info, -vv debug); RUST_LOG takes precedence.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate, compile, execute, rerank and report.
    Run(RunArgs),
    /// Sample candidates.
    Generate(RunArgs),
    /// Sample (if needed) and compile candidates.
    Compile(RunArgs),
    /// Run candidates and the reference against the tests.
    Execute(RunArgs),
    /// Rank candidates under each policy.
    Rerank(RunArgs),
    /// Re-emit reports for an existing run.
    Report(ReportArgs),
    /// Distance between two sources, or between one function in two objects.
    Score(ScoreArgs),
    /// Precision / recall / F1 of vulnerability findings against labels.
    Juliet(JulietArgs),
}

#[derive(Args, Default)]
struct RunArgs {
    /// TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Task file or directory of task files.
    #[arg(long)]
    tasks: Option<PathBuf>,
    /// Defaults to an id derived from the run settings.
    #[arg(long, visible_alias = "run")]
    run_id: Option<String>,
    /// Candidates per task.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    max_tokens: Option<usize>,
    /// Comma-separated: logprob, bytedist, neural, two_stage, oracle.
    #[arg(long, value_delimiter = ',')]
    policies: Option<Vec<String>>,
    /// Compiler profile file (TOML/JSON) or builtin id; repeatable.
    #[arg(long)]
    profile: Vec<String>,
    /// Concurrent tasks (each runs one external process at a time).
    #[arg(long)]
    jobs: Option<usize>,
    /// Comma-separated report formats: json, csv, markdown.
    #[arg(long, value_delimiter = ',')]
    format: Option<Vec<String>>,
    #[arg(long)]
    gen_endpoint: Option<String>,
    #[arg(long)]
    scorer_endpoint: Option<String>,
    /// Replay candidate file (line-delimited JSON); replaces the remote generator.
    #[arg(long)]
    replay: Option<PathBuf>,
    /// Replay score file; replaces the remote scorer.
    #[arg(long)]
    scorer_replay: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Length-penalty exponent for log-probability ranking.
    #[arg(long)]
    alpha: Option<f64>,
    /// CPU seconds per test process.
    #[arg(long)]
    cpu_limit: Option<f64>,
    /// Also emit prefix-best curves.
    #[arg(long)]
    prefix_curves: bool,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, visible_alias = "run")]
    run_id: String,
    #[arg(long, value_delimiter = ',', default_value = "json,csv,markdown")]
    format: Vec<String>,
    #[arg(long)]
    prefix_curves: bool,
}

#[derive(Args)]
struct ScoreArgs {
    reference: PathBuf,
    candidate: PathBuf,
    /// Compare this function's bytes in two object files instead of sources.
    #[arg(long)]
    symbol: Option<String>,
}

#[derive(Args)]
struct JulietArgs {
    /// Line-delimited `{function_id, flagged}`.
    #[arg(long, conflicts_with = "sarif", required_unless_present = "sarif")]
    findings: Option<PathBuf>,
    /// SARIF log; results are mapped to functions by logical location name.
    #[arg(long)]
    sarif: Option<PathBuf>,
    /// Line-delimited `{function_id, label: good|bad}`.
    #[arg(long)]
    labels: PathBuf,
}

/// Keys accepted in `--config` files.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CliConfig {
    tasks: Option<PathBuf>,
    run_id: Option<String>,
    n: Option<usize>,
    temperature: Option<f64>,
    max_tokens: Option<usize>,
    policies: Option<Vec<String>>,
    #[serde(default)]
    profiles: Vec<String>,
    jobs: Option<usize>,
    formats: Option<Vec<String>>,
    gen_endpoint: Option<String>,
    replay: Option<PathBuf>,
    scorer_endpoint: Option<String>,
    scorer_replay: Option<PathBuf>,
    scorer_timeout_secs: Option<f64>,
    request_timeout_secs: Option<f64>,
    prompt_template: Option<String>,
    seed: Option<u64>,
    alpha: Option<f64>,
    cpu_limit: Option<f64>,
    memory_bytes: Option<u64>,
    prefix_curves: Option<bool>,
}

enum CliError {
    Usage(String),
    Pipeline(PipelineError),
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        if e.is_configuration() {
            CliError::Usage(e.to_string())
        } else {
            CliError::Pipeline(e)
        }
    }
}

fn usage(msg: impl std::fmt::Display) -> CliError {
    CliError::Usage(msg.to_string())
}

const DEFAULT_N: usize = 8;
const DEFAULT_POLICIES: &[&str] = &["logprob", "bytedist", "neural", "two_stage", "oracle"];

fn env_nonempty(key: &str) -> Option<String> {
    std::env::var(key).ok().filter(|v| !v.is_empty())
}

fn parse_formats(names: &[String]) -> Result<Vec<ReportFormat>, CliError> {
    let mut out: Vec<ReportFormat> = Vec::new();
    for n in names {
        let f: ReportFormat = n.parse().map_err(usage)?;
        if !out.contains(&f) {
            out.push(f);
        }
    }
    Ok(out)
}

fn secs(v: f64, what: &str) -> Result<Duration, CliError> {
    Duration::try_from_secs_f64(v).map_err(|_| usage(format!("{what} must be a non-negative number of seconds")))
}

/// Resolves `--profile` entries plus every builtin the tasks reference.
fn resolve_profiles(entries: &[String], tasks: &TaskSet) -> Result<Vec<CompilerProfile>, CliError> {
    let mut registry: BTreeMap<String, CompilerProfile> = BTreeMap::new();
    for e in entries {
        let p = if Path::new(e).is_file() {
            CompilerProfile::from_file(Path::new(e)).map_err(usage)?
        } else {
            CompilerProfile::builtin(e).ok_or_else(|| {
                usage(format!(
                    "`{e}` is neither a profile file nor a builtin profile ({})",
                    CompilerProfile::builtin_ids().join(", ")
                ))
            })?
        };
        registry.insert(p.profile_id.clone(), p);
    }
    let used: BTreeSet<&str> = tasks.tasks.iter().map(|t| t.compiler_profile_id.as_str()).collect();
    let mut out = Vec::new();
    for id in used {
        let p = match registry.get(id) {
            Some(p) => p.clone(),
            None => CompilerProfile::builtin(id)
                .ok_or_else(|| usage(format!("no compiler profile `{id}`; pass it with --profile")))?,
        };
        out.push(p);
    }
    Ok(out)
}

struct Prepared {
    pipeline: Pipeline,
    formats: Vec<ReportFormat>,
}

fn prepare(store: &Path, args: RunArgs) -> Result<Prepared, CliError> {
    let file: CliConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| usage(format!("reading {}: {e}", path.display())))?;
            toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => CliConfig::default(),
    };

    let tasks_path = args.tasks.or(file.tasks).ok_or_else(|| usage("--tasks is required"))?;
    let tasks = load_tasks(&tasks_path).map_err(usage)?;
    if tasks.is_empty() {
        return Err(usage(format!("no tasks in {}", tasks_path.display())));
    }

    let n = args.n.or(file.n).unwrap_or(DEFAULT_N);
    let replay = args.replay.or(file.replay);
    let endpoint = args.gen_endpoint.or_else(|| env_nonempty(GEN_ENDPOINT_ENV)).or(file.gen_endpoint);
    let mut generator_config = match (replay, endpoint) {
        (Some(path), _) => GeneratorConfig::replay(path, n),
        (None, Some(url)) => GeneratorConfig::remote(&url, n),
        (None, None) => {
            return Err(usage(format!(
                "no generator: pass --replay FILE, --gen-endpoint URL or set {GEN_ENDPOINT_ENV}"
            )))
        }
    };
    if let Some(t) = args.temperature.or(file.temperature) {
        generator_config.temperature = t;
    }
    if let Some(m) = args.max_tokens.or(file.max_tokens) {
        generator_config.max_tokens = m;
    }
    if let Some(t) = file.request_timeout_secs {
        generator_config.request_timeout = secs(t, "request_timeout_secs")?;
    }
    if let Some(t) = file.prompt_template {
        generator_config.prompt_template_id = t;
    }
    generator_config.validate().map_err(usage)?;

    let scorer_timeout = secs(file.scorer_timeout_secs.unwrap_or(600.0), "scorer_timeout_secs")?;
    let scorer = match (
        args.scorer_replay.or(file.scorer_replay),
        args.scorer_endpoint.or_else(|| env_nonempty(SCORER_ENDPOINT_ENV)).or(file.scorer_endpoint),
    ) {
        (Some(path), _) => Some(ScorerConfig::Replay { path }),
        (None, Some(endpoint)) => Some(ScorerConfig::Remote {
            endpoint,
            timeout: scorer_timeout,
        }),
        (None, None) => None,
    };

    let policy_names: Vec<String> = args
        .policies
        .or(file.policies)
        .unwrap_or_else(|| DEFAULT_POLICIES.iter().map(|s| s.to_string()).collect());
    let mut policies: Vec<PolicyId> = Vec::new();
    for p in &policy_names {
        let id: PolicyId = p.trim().parse().map_err(usage)?;
        if !policies.contains(&id) {
            policies.push(id);
        }
    }

    let mut profile_entries = file.profiles;
    profile_entries.extend(args.profile);
    let compiler_profiles = resolve_profiles(&profile_entries, &tasks)?;

    let mut limits = SandboxLimits::default();
    if let Some(c) = args.cpu_limit.or(file.cpu_limit) {
        limits.cpu = secs(c, "cpu limit")?;
    }
    if let Some(m) = file.memory_bytes {
        limits.memory_bytes = m;
    }

    let mut manifest = RunManifest {
        run_id: String::new(),
        created_at: chrono::Utc::now(),
        task_set_digest: tasks.digest.clone(),
        tasks_path,
        generator_config,
        compiler_profiles,
        policy_ids: policies.iter().map(|p| p.as_str().to_string()).collect(),
        scorer,
        limits,
        seed: args.seed.or(file.seed).unwrap_or(0),
    };
    manifest.run_id = args.run_id.or(file.run_id).unwrap_or_else(|| derived_run_id(&manifest));

    let alpha = args.alpha.or(file.alpha).unwrap_or(decaf_core::rerank::DEFAULT_ALPHA);
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(usage("alpha must be a non-negative number"));
    }
    let options = RunOptions {
        jobs: args.jobs.or(file.jobs).unwrap_or(RunOptions::default().jobs).max(1),
        alpha,
        prefix_curves: args.prefix_curves || file.prefix_curves.unwrap_or(false),
    };
    let formats = parse_formats(
        &args
            .format
            .or(file.formats)
            .unwrap_or_else(|| vec!["json".into(), "csv".into(), "markdown".into()]),
    )?;

    let generator = build_generator(&manifest.generator_config)?;
    let scorer = match &manifest.scorer {
        Some(cfg) => Some(cfg.build().map_err(usage)?),
        None => None,
    };
    let pipeline = Pipeline::open(RunStore::new(store), manifest, tasks, Some(generator), scorer, options)?;
    Ok(Prepared { pipeline, formats })
}

fn run_phases(store: &Path, args: RunArgs, last: Phase, report: bool) -> Result<(), CliError> {
    let Prepared { pipeline, formats } = prepare(store, args)?;
    info!(run = %pipeline.manifest().run_id, "starting");
    pipeline.run_through(last)?;
    if report {
        for path in pipeline.report(&formats)? {
            println!("{}", path.display());
        }
    }
    println!("run_id: {}", pipeline.manifest().run_id);
    Ok(())
}

fn report(store: &Path, args: ReportArgs) -> Result<(), CliError> {
    let store = RunStore::new(store);
    let manifest = store
        .read_manifest(&args.run_id)
        .map_err(|e| CliError::Pipeline(e.into()))?
        .ok_or_else(|| usage(format!("no run `{}` in {}", args.run_id, store.root().display())))?;
    let tasks = load_tasks(&manifest.tasks_path).map_err(usage)?;
    manifest_policies(&manifest)?;
    let formats = parse_formats(&args.format)?;
    let options = RunOptions {
        prefix_curves: args.prefix_curves,
        ..RunOptions::default()
    };
    let pipeline = Pipeline::open(store, manifest, tasks, None, None, options)?;
    for path in pipeline.report(&formats)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn score(args: ScoreArgs) -> Result<(), CliError> {
    let out = match &args.symbol {
        None => {
            let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| usage(format!("reading {}: {e}", p.display())));
            let d = source_edit_distance(&read(&args.reference)?, &read(&args.candidate)?);
            serde_json::json!({"kind": "source", "raw": d.raw, "normalized": d.normalized})
        }
        Some(symbol) => {
            let extract = |p: &Path| -> Result<_, CliError> {
                let data = std::fs::read(p).map_err(|e| usage(format!("reading {}: {e}", p.display())))?;
                toolchain::function_bytes(&data, symbol, "").map_err(|e| CliError::Pipeline(e.into()))
            };
            let (a, b) = (extract(&args.reference)?, extract(&args.candidate)?);
            let d = wildcard_levenshtein(&a, &b).map_err(|e| CliError::Pipeline(PipelineError::Config(e.to_string())))?;
            serde_json::json!({
                "kind": "bytes",
                "raw": d.raw,
                "normalized": d.normalized,
                "exact_match": exact_match(&a, &b),
                "reference_wildcards": a.wildcard_count(),
                "candidate_wildcards": b.wildcard_count(),
            })
        }
    };
    println!("{}", serde_json::to_string_pretty(&out).expect("json"));
    Ok(())
}

fn juliet(args: JulietArgs) -> Result<(), CliError> {
    let labels = analysis::load_labels(&args.labels).map_err(usage)?;
    let findings = match (&args.findings, &args.sarif) {
        (Some(f), _) => analysis::load_findings(f).map_err(usage)?,
        (None, Some(s)) => {
            let text = std::fs::read_to_string(s).map_err(|e| usage(format!("reading {}: {e}", s.display())))?;
            let sarif: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", s.display())))?;
            let functions: BTreeSet<String> = labels.keys().cloned().collect();
            analysis::findings_from_sarif(&sarif, &functions)
        }
        (None, None) => unreachable!("clap requires one of --findings / --sarif"),
    };
    let r = analysis::juliet_confusion(&findings, &labels).map_err(usage)?;
    println!("{}", serde_json::to_string_pretty(&r).expect("json"));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default_level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(default_level)))
        .with_writer(std::io::stderr)
        .init();

    let store = cli.store.as_path();
    let result = match cli.command {
        Command::Run(a) => run_phases(store, a, Phase::Rerank, true),
        Command::Generate(a) => run_phases(store, a, Phase::Generate, false),
        Command::Compile(a) => run_phases(store, a, Phase::Compile, false),
        Command::Execute(a) => run_phases(store, a, Phase::Execute, false),
        Command::Rerank(a) => run_phases(store, a, Phase::Rerank, false),
        Command::Report(a) => report(store, a),
        Command::Score(a) => score(a),
        Command::Juliet(a) => juliet(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Pipeline(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
