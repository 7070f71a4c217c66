use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cicl_core::analysis::{emit_reports, ReportError, ReportFormat};
use cicl_core::datamodel::{load_run_config, ConfigError, Mode, RunConfig};
use cicl_core::modelclient::{build_backend, LabelScorer};
use cicl_core::runner::{
    classify_pool_for, first_query_prompt, load_run_record, resolve_run_dir, run_sweep, LoadError, PromptRequest,
    SweepError, SweepOptions,
};
use cicl_core::selection::FewShotSet;

const EXIT_VALIDATION: u8 = 1;
const EXIT_BACKEND: u8 = 2;
const EXIT_INCOMPLETE: u8 = 3;

#[derive(Parser)]
#[command(name = "cicl", version, about = "Standard vs corrective in-context learning sweeps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute the sweep described by a config file.
    Run(RunArgs),
    /// Write report tables for one or more completed runs.
    Analyze(AnalyzeArgs),
    /// Print the exact prompt sent for the first evaluation query.
    DumpPrompt(DumpArgs),
    /// Classify one seed's exemplar pool and store it in the run directory.
    ClassifyPool(PoolArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Parallel scoring requests (default: logical cores, capped at the backend's max_concurrency).
    #[arg(long)]
    workers: Option<usize>,
    /// Keep finished cells from an earlier, interrupted run.
    #[arg(long)]
    resume: bool,
    /// Swap exemplars until the leave-one-out error count matches the requested one.
    #[arg(long)]
    strict_proportion: bool,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Md,
    Csv,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Run directories (`{out_dir}/{config_hash}`).
    run_dirs: Vec<PathBuf>,
    /// Locate the run directory from a config instead.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "md")]
    format: FormatArg,
    /// Where reports go (default: `reports/` inside the first run directory).
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    dataset: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// icl or cicl
    #[arg(long, value_parser = parse_mode)]
    mode: Mode,
    #[arg(long, default_value_t = 0.0)]
    proportion: f64,
    /// JSON few-shot set to use instead of sampling one.
    #[arg(long)]
    fewshot: Option<PathBuf>,
    /// First-pass prediction for the query (CICL).
    #[arg(long)]
    query_predicted: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct PoolArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    dataset: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse::<Mode>().map_err(|e| e.to_string())
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn validation(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_VALIDATION,
            message: message.into(),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::validation(e.to_string())
    }
}

impl From<SweepError> for Failure {
    fn from(e: SweepError) -> Self {
        let code = if e.is_transport() {
            EXIT_BACKEND
        } else {
            match &e {
                SweepError::Interrupted { .. } | SweepError::Incomplete { .. } => EXIT_INCOMPLETE,
                SweepError::Load(LoadError::Missing(_)) => EXIT_INCOMPLETE,
                SweepError::Backend(_) | SweepError::Selection { .. } => EXIT_BACKEND,
                _ => EXIT_VALIDATION,
            }
        };
        let mut message = e.to_string();
        if let SweepError::Incomplete { failures } = &e {
            for f in failures {
                message.push_str(&format!("\n  {}: {}", f.cell, f.message));
            }
        }
        Failure { code, message }
    }
}

impl From<LoadError> for Failure {
    fn from(e: LoadError) -> Self {
        match &e {
            LoadError::Missing(cells) => Failure {
                code: EXIT_INCOMPLETE,
                message: format!("missing cells:\n  {}", cells.join("\n  ")),
            },
            _ => Failure::validation(e.to_string()),
        }
    }
}

impl From<ReportError> for Failure {
    fn from(e: ReportError) -> Self {
        let code = match e {
            ReportError::Incomplete { .. } => EXIT_INCOMPLETE,
            _ => EXIT_VALIDATION,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn workers_for(requested: Option<usize>, config: &RunConfig) -> usize {
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    requested.unwrap_or(cores).min(config.backend.max_concurrency).max(1)
}

fn backend_for(config: &RunConfig) -> Result<std::sync::Arc<dyn LabelScorer>, Failure> {
    let cache = config.out_dir.join("cache").join("scores.jsonl");
    build_backend(&config.backend, config.normalize, Some(&cache)).map_err(|e| Failure::validation(e.to_string()))
}

fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    let mut config = load_run_config(path)?;
    config.backend = config.backend.clone().with_env_override();
    Ok(config)
}

fn cmd_run(args: RunArgs) -> Result<(), Failure> {
    let mut config = load_config(&args.config)?;
    if let Some(dir) = args.out_dir {
        config.out_dir = dir;
    }
    if args.strict_proportion {
        config.strict_proportion = true;
    }
    config.validate()?;
    let opts = SweepOptions {
        workers: workers_for(args.workers, &config),
        resume: args.resume,
        cell_limit: None,
    };
    log::info!(
        "running {} dataset(s) with {} worker(s)",
        config.datasets.len(),
        opts.workers
    );
    let record = run_sweep(&config, &opts)?;
    if let Some(m) = &record.metadata {
        log::info!(
            "{} cells computed, {} backend calls, {:.1}s",
            m.executed_cells,
            m.backend_calls,
            m.wall_seconds
        );
    }
    println!("{}", config.out_dir.join(&record.config_hash).display());
    Ok(())
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<(), Failure> {
    let mut dirs = args.run_dirs;
    if let Some(path) = &args.config {
        dirs.push(resolve_run_dir(&load_config(path)?)?);
    }
    if dirs.is_empty() {
        return Err(Failure::validation("give a run directory or --config"));
    }
    let mut records = Vec::new();
    for d in &dirs {
        records.push(load_run_record(d)?);
    }
    let out = args.out_dir.unwrap_or_else(|| dirs[0].join("reports"));
    let format = match args.format {
        FormatArg::Md => ReportFormat::Markdown,
        FormatArg::Csv => ReportFormat::Csv,
    };
    for path in emit_reports(&records, &out, format)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn cmd_dump_prompt(args: DumpArgs) -> Result<(), Failure> {
    let mut config = match &args.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = args.data_dir {
        config.data_dir = d;
    }
    let fewshot = match &args.fewshot {
        Some(p) => {
            let body = std::fs::read_to_string(p).map_err(|e| Failure::validation(format!("{}: {e}", p.display())))?;
            let set: FewShotSet =
                serde_json::from_str(&body).map_err(|e| Failure::validation(format!("{}: {e}", p.display())))?;
            if !set.is_consistent() {
                return Err(Failure::validation(format!(
                    "{}: inconsistent few-shot set",
                    p.display()
                )));
            }
            Some(set)
        }
        None => None,
    };
    let backend = backend_for(&config)?;
    let req = PromptRequest {
        dataset: args.dataset,
        seed: args.seed,
        mode: args.mode,
        proportion: args.proportion,
        fewshot,
        query_predicted: args.query_predicted,
    };
    let prompt = first_query_prompt(&config, backend.as_ref(), &req, workers_for(args.workers, &config))?;
    print!("{}", prompt.rendered_text);
    Ok(())
}

fn cmd_classify_pool(args: PoolArgs) -> Result<(), Failure> {
    let mut config = load_config(&args.config)?;
    if let Some(dir) = args.out_dir {
        config.out_dir = dir;
    }
    let backend = backend_for(&config)?;
    let workers = workers_for(args.workers, &config);
    let (path, pool) = classify_pool_for(&config, backend.as_ref(), &args.dataset, args.seed, workers)?;
    log::info!("{} correct, {} incorrect", pool.correct_count(), pool.incorrect_count());
    println!("{}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::DumpPrompt(a) => cmd_dump_prompt(a),
        Command::ClassifyPool(a) => cmd_classify_pool(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
