use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};

use capstep_core::capability::Registry;
use capstep_core::config::{load_config, AppConfig, ConfigLoadError};
use capstep_core::evaluation::{comparison_table, load_tasks, replay_trace, run_benchmark};
use capstep_core::images::ImageStore;
use capstep_core::orchestrator::{run_session, RunMode, ToolRuntime};
use capstep_core::remote::verify_remote_tools;
use capstep_core::rundir::RunDir;
use capstep_core::starter::StarterSet;
use capstep_core::task::TaskInstance;
use capstep_core::trace::{TraceRecord, TurnOutcome};

/// Used when no `--config` is given and `capstep.toml` is absent: the
/// built-in starter transcripts as the only provider.
const BUILTIN_CONFIG: &str = "[providers.starter]\nkind = \"scripted\"\n";

const EXIT_CRASH: u8 = 2;
const EXIT_CONFIG: u8 = 3;

#[derive(Parser)]
#[command(name = "capstep", version, about = "Capability-first multimodal agent runtime")]
struct Cli {
    /// Config file (default: ./capstep.toml when present, else built-in).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a task file and write a run directory.
    Run {
        #[arg(long)]
        tasks: PathBuf,
        /// full, flat, or drop:<capability>[,<capability>...]
        #[arg(long)]
        mode: Option<String>,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Re-run recorded traces and check they reproduce.
    Replay {
        /// A trace file, a traces/ directory or a run directory.
        #[arg(long)]
        trace: PathBuf,
    },
    /// Print reports of one run or of every run under a directory.
    Report {
        #[arg(long)]
        runs: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Inspect the tool registry.
    Tools {
        #[command(subcommand)]
        action: ToolsAction,
    },
    /// Run a single task and print every turn.
    Session {
        #[arg(long)]
        task_id: String,
        /// Task file; the starter set when omitted.
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long)]
        mode: Option<String>,
        /// Print each turn's model text, call and observation.
        #[arg(long)]
        interactive_log: bool,
    },
    /// Write the 30-task starter set (tasks.jsonl, scripts.json, images/).
    Starter {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum ToolsAction {
    List,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Json,
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Failure { code: 1, error }
    }
}

impl From<ConfigLoadError> for Failure {
    fn from(e: ConfigLoadError) -> Self {
        config_failure(anyhow!(e))
    }
}

fn config_failure(error: anyhow::Error) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        error,
    }
}

fn resolve_config(path: Option<&Path>) -> Result<AppConfig, Failure> {
    match path {
        Some(p) => Ok(load_config(p)?),
        None if Path::new("capstep.toml").is_file() => Ok(load_config(Path::new("capstep.toml"))?),
        None => Ok(AppConfig::from_toml_str(
            BUILTIN_CONFIG,
            "<builtin>",
            &std::env::current_dir().context("current directory")?,
            &|k| std::env::var(k).ok(),
        )?),
    }
}

fn init_logging(level: &str) {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(level));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

fn runtime(config: &AppConfig, images: Arc<ImageStore>) -> Result<ToolRuntime, Failure> {
    let mut registry = config.registry()?;
    if !config.endpoints.is_empty() {
        for warning in verify_remote_tools(&mut registry, &config.endpoints) {
            tracing::warn!("{warning}");
        }
    }
    Ok(ToolRuntime::new(registry, images).with_endpoints(config.endpoints.clone()))
}

fn mode_for(config: &AppConfig, registry: &Registry, flag: Option<&str>) -> Result<RunMode, Failure> {
    match flag {
        Some(m) => RunMode::parse(m, registry).map_err(|e| config_failure(anyhow!("--mode: {e}"))),
        None => Ok(config.run.mode.clone()),
    }
}

fn cmd_run(config: &AppConfig, tasks: &Path, mode: Option<&str>, parallel: usize) -> Result<u8, Failure> {
    if parallel == 0 {
        return Err(config_failure(anyhow!("--parallel must be at least 1")));
    }
    let run_mode = mode_for(config, &config.registry()?, mode)?;
    let run_config = config.run.clone().with_mode(run_mode);
    let dir = RunDir::create(&config.runs_root, &config.to_toml()).context("creating run directory")?;
    let images = Arc::new(dir.image_store().context("opening image store")?);
    let tasks = load_tasks(tasks, &images).context("loading tasks")?;
    let runtime = runtime(config, images.clone())?;
    let factory = config.planner(images)?;
    let run = run_benchmark(&tasks, factory.as_ref(), &runtime, &run_config, parallel, Some(&dir))
        .map_err(|e| config_failure(anyhow!(e)))?;
    dir.write_report(&run.report).context("writing report")?;
    print!("{}", run.report.to_table());
    println!("run directory: {}", dir.path().display());
    Ok(if run.report.crashed > 0 { EXIT_CRASH } else { 0 })
}

fn trace_files(path: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    if let Ok(dir) = RunDir::open(path) {
        return Ok(dir.trace_files()?);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .with_context(|| path.display().to_string())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    Ok(files)
}

fn cmd_replay(config: &AppConfig, path: &Path) -> Result<u8, Failure> {
    let files = trace_files(path)?;
    if files.is_empty() {
        return Err(anyhow!("no trace files under {}", path.display()).into());
    }
    let images = match RunDir::of_trace(&files[0]) {
        Some(dir) => dir.image_store().context("opening run images")?,
        None => ImageStore::new(),
    };
    let runtime = runtime(config, Arc::new(images))?;
    let mut reproduced = 0;
    for file in &files {
        let text = std::fs::read_to_string(file).with_context(|| file.display().to_string())?;
        let trace = TraceRecord::from_json(&text).with_context(|| file.display().to_string())?;
        match replay_trace(&trace, &runtime) {
            Ok(_) => {
                reproduced += 1;
                println!("ok        {}", trace.task_id);
            }
            Err(d) => println!("diverged  {}  {d}", trace.task_id),
        }
    }
    println!("reproduced {reproduced}/{}", files.len());
    Ok(if reproduced == files.len() { 0 } else { 1 })
}

fn cmd_report(config: &AppConfig, runs: Option<&Path>, format: Format) -> Result<u8, Failure> {
    let root = runs.unwrap_or(&config.runs_root);
    let dirs = RunDir::list(root).with_context(|| root.display().to_string())?;
    let mut reports = Vec::new();
    for dir in &dirs {
        match dir.read_report() {
            Ok(r) => reports.push((dir.id(), r)),
            Err(e) => tracing::warn!("skipping {}: {e}", dir.path().display()),
        }
    }
    if reports.is_empty() {
        return Err(anyhow!("no reports under {}", root.display()).into());
    }
    match format {
        Format::Json => {
            let value: serde_json::Map<String, serde_json::Value> = reports
                .iter()
                .map(|(id, r)| (id.clone(), serde_json::to_value(r).expect("report serializes")))
                .collect();
            println!("{}", serde_json::to_string_pretty(&value).expect("json"));
        }
        Format::Table => {
            for (id, r) in &reports {
                println!("== {id}");
                print!("{}", r.to_table());
            }
            if reports.len() > 1 {
                let refs: Vec<_> = reports.iter().map(|(_, r)| r).collect();
                println!("== comparison");
                print!("{}", comparison_table(&refs));
            }
        }
    }
    Ok(0)
}

fn cmd_tools_list(config: &AppConfig) -> Result<u8, Failure> {
    let runtime = runtime(config, Arc::new(ImageStore::new()))?;
    let registry = &runtime.registry;
    for cap in capstep_core::capability::Capability::ALL {
        println!("{}", cap.display_name());
        for tool in registry.tools_for(cap) {
            let backend = if tool.is_remote() { "remote" } else { "local" };
            let route = config
                .routes
                .get(&tool.name)
                .map(|r| format!("{} ({})", r.provider, r.level))
                .unwrap_or_default();
            let status = registry
                .unavailable_reason(&tool.name)
                .map(|r| format!("  UNAVAILABLE: {r}"))
                .unwrap_or_default();
            println!("  {:<20} {:<7} {:<24} {}{}", tool.name, backend, route, tool.schema_line(), status);
        }
    }
    Ok(0)
}

fn print_turns(trace: &TraceRecord) {
    for turn in &trace.turns {
        let cap = turn.capability.map(|c| c.id()).unwrap_or("-");
        println!("--- turn {} [{cap}]", turn.index);
        for line in turn.raw.lines() {
            println!("  | {line}");
        }
        let outcome = match &turn.outcome {
            TurnOutcome::Answered => "answered".to_string(),
            TurnOutcome::ToolExecuted { tool } => format!("executed {tool}"),
            TurnOutcome::ToolFailed { tool, detail } => format!("{tool} failed: {detail}"),
            TurnOutcome::ProtocolError { violation } => format!("protocol error: {}", violation.describe()),
            TurnOutcome::ProviderFailed { detail } => format!("provider failed: {detail}"),
        };
        println!("  => {outcome}");
        if let Some(obs) = &turn.observation {
            for line in obs.text.lines() {
                println!("  < {line}");
            }
        }
        if !turn.evicted.is_empty() {
            println!("  evicted: {}", turn.evicted.join(", "));
        }
    }
}

fn cmd_session(
    config: &AppConfig,
    task_id: &str,
    tasks: Option<&Path>,
    mode: Option<&str>,
    interactive_log: bool,
) -> Result<u8, Failure> {
    let images = Arc::new(ImageStore::new());
    let tasks: Vec<TaskInstance> = match tasks {
        Some(path) => load_tasks(path, &images).context("loading tasks")?,
        None => StarterSet::generate().load(&images).context("loading starter set")?,
    };
    let task = tasks
        .iter()
        .find(|t| t.id == task_id)
        .ok_or_else(|| anyhow!("no task with id {task_id:?}"))?;
    let runtime = runtime(config, images.clone())?;
    let run_config = config.run.clone().with_mode(mode_for(config, &runtime.registry, mode)?);
    let factory = config.planner(images)?;
    let mut provider = factory
        .create(task)
        .map_err(|e| anyhow!("creating provider: {e}"))?;
    let result = run_session(task, provider.as_mut(), &runtime, &run_config);
    println!("task {}: {}", task.id, task.instruction);
    if interactive_log {
        print_turns(&result.trace);
    }
    let answer = result.answer.as_deref().unwrap_or("<none>");
    let correct = capstep_core::evaluation::score_answer(result.answer.as_deref(), task);
    println!(
        "answer: {answer}  (gold {}, {}, {:?} after {} turns)",
        task.gold,
        if correct { "correct" } else { "wrong" },
        result.termination,
        result.turns_used
    );
    Ok(0)
}

fn cmd_starter(out: &Path) -> Result<u8, Failure> {
    let set = StarterSet::generate();
    set.write_to(out).with_context(|| out.display().to_string())?;
    println!("wrote {} tasks to {}", set.lines.len(), out.display());
    Ok(0)
}

fn dispatch(cli: Cli) -> Result<u8, Failure> {
    let config = resolve_config(cli.config.as_deref())?;
    init_logging(&config.log_level);
    match cli.command {
        Command::Run { tasks, mode, parallel } => cmd_run(&config, &tasks, mode.as_deref(), parallel),
        Command::Replay { trace } => cmd_replay(&config, &trace),
        Command::Report { runs, format } => cmd_report(&config, runs.as_deref(), format),
        Command::Tools { action: ToolsAction::List } => cmd_tools_list(&config),
        Command::Session {
            task_id,
            tasks,
            mode,
            interactive_log,
        } => cmd_session(&config, &task_id, tasks.as_deref(), mode.as_deref(), interactive_log),
        Command::Starter { out } => cmd_starter(&out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
