//! Task loading, scoring, benchmark runs, ablations and trace replay.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::capability::{AliasTable, Capability};
use crate::images::{ImageMetadata, ImageStore};
use crate::orchestrator::{run_session, RunConfig, RunMode, SessionResult, Termination, ToolRuntime};
use crate::provider::{ProviderFactory, ScriptedProvider, ScriptedTranscript};
use crate::task::{AnswerMode, TaskInstance};
use crate::toolkit::scene::{self, SceneDescription, SceneSource, META_SCENE};
use crate::trace::{TraceRecord, TurnOutcome};

// ---------------------------------------------------------------------------
// task files

/// One image entry of a task line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImageSpec {
    Path(String),
    File(ImageFile),
    Scene(SceneImage),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageFile {
    pub path: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: ImageMetadata,
}

/// A grid scene rendered at load time; `seed` adds deterministic clutter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneImage {
    pub scene: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: ImageMetadata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AnswerModeSpec {
    Name(String),
    Full(AnswerMode),
}

impl AnswerModeSpec {
    fn resolve(&self) -> Result<AnswerMode, String> {
        match self {
            AnswerModeSpec::Full(m) => Ok(*m),
            AnswerModeSpec::Name(n) => match n.as_str() {
                "multiple_choice" => Ok(AnswerMode::MultipleChoice),
                "exact_text" => Ok(AnswerMode::ExactText),
                "action_sequence" => Ok(AnswerMode::ActionSequence),
                "numeric" => Ok(AnswerMode::Numeric { tolerance: 1e-6 }),
                other => Err(format!("unknown answer_mode {other:?}")),
            },
        }
    }
}

/// One line of a task file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskLine {
    pub id: String,
    pub instruction: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub images: Vec<ImageSpec>,
    pub gold: String,
    pub answer_mode: AnswerModeSpec,
    pub family: String,
    #[serde(default)]
    pub capability_labels: Vec<String>,
}

#[derive(Debug, Error)]
pub enum TaskLoadError {
    #[error("cannot read task file {path}: {detail}")]
    Io { path: String, detail: String },
    #[error("schema error on line {line}: {detail}")]
    SchemaError { line: usize, detail: String },
    #[error("line {line}: missing image {path}")]
    MissingImage { line: usize, path: String },
    #[error("line {line}: duplicate task id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: image error: {detail}")]
    Image { line: usize, detail: String },
}

/// Reads an image file named in a task line; `None` when it does not exist.
pub type FileReader<'a> = &'a dyn Fn(&str) -> Option<Vec<u8>>;

fn ingest_image(
    spec: &ImageSpec,
    read: FileReader<'_>,
    store: &ImageStore,
    line: usize,
) -> Result<crate::images::ImageRef, TaskLoadError> {
    let image_err = |detail: String| TaskLoadError::Image { line, detail };
    let (path, metadata) = match spec {
        ImageSpec::Path(p) => (p.clone(), ImageMetadata::new()),
        ImageSpec::File(f) => (f.path.clone(), f.metadata.clone()),
        ImageSpec::Scene(s) => {
            let grid = scene::simplify_image(SceneSource::Description(&s.scene))
                .map_err(|e| image_err(e.to_string()))?;
            let pixels = match s.seed {
                Some(seed) => scene::render_cluttered_grid(&grid, seed),
                None => scene::render_grid(&grid),
            };
            let mut metadata = s.metadata.clone();
            metadata.insert(META_SCENE.into(), SceneDescription::from_grid(&grid).to_json());
            return store
                .insert_rgba(&pixels, metadata)
                .map_err(|e| image_err(e.to_string()));
        }
    };
    let bytes = read(&path).ok_or(TaskLoadError::MissingImage { line, path })?;
    store
        .insert_encoded(bytes, metadata)
        .map_err(|e| image_err(e.to_string()))
}

/// Parses a JSON-lines task file. Relative image paths resolve against the
/// file's directory; images are ingested into `store`.
pub fn load_tasks(path: &Path, store: &ImageStore) -> Result<Vec<TaskInstance>, TaskLoadError> {
    let text = fs::read_to_string(path).map_err(|e| TaskLoadError::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_tasks(&text, base, store)
}

pub fn parse_tasks(
    text: &str,
    base: &Path,
    store: &ImageStore,
) -> Result<Vec<TaskInstance>, TaskLoadError> {
    let read = |p: &str| {
        let full: PathBuf = base.join(p);
        fs::read(full).ok()
    };
    parse_tasks_with(text, &read, store)
}

/// Like [`parse_tasks`] with a custom source for image files.
pub fn parse_tasks_with(
    text: &str,
    read: FileReader<'_>,
    store: &ImageStore,
) -> Result<Vec<TaskInstance>, TaskLoadError> {
    let aliases = AliasTable::builtin();
    let mut seen = BTreeSet::new();
    let mut tasks = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let schema = |detail: String| TaskLoadError::SchemaError { line, detail };
        let entry: TaskLine = serde_json::from_str(raw).map_err(|e| schema(e.to_string()))?;
        if entry.id.trim().is_empty() {
            return Err(schema("empty id".into()));
        }
        if entry.instruction.trim().is_empty() {
            return Err(schema("empty instruction".into()));
        }
        if entry.gold.trim().is_empty() {
            return Err(schema("empty gold".into()));
        }
        let answer_mode = entry.answer_mode.resolve().map_err(schema)?;
        let capability_labels = entry
            .capability_labels
            .iter()
            .map(|l| aliases.canonicalize(l).map_err(|e| schema(e.to_string())))
            .collect::<Result<BTreeSet<Capability>, _>>()?;
        if !seen.insert(entry.id.clone()) {
            return Err(TaskLoadError::DuplicateId { line, id: entry.id });
        }
        let images = entry
            .images
            .iter()
            .map(|s| ingest_image(s, read, store, line))
            .collect::<Result<Vec<_>, _>>()?;
        tasks.push(TaskInstance {
            id: entry.id,
            instruction: entry.instruction,
            images,
            gold: entry.gold,
            answer_mode,
            family: entry.family,
            capability_labels,
        });
    }
    Ok(tasks)
}

// ---------------------------------------------------------------------------
// scoring

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Score {
    pub correct: bool,
    /// Set when the prediction or gold could not be interpreted.
    pub flag: Option<String>,
}

fn mc_letter(text: &str) -> Option<char> {
    let t = text.trim().to_uppercase();
    let t = t.trim_end_matches(|c: char| c.is_ascii_punctuation() && c != ')' && c != ']');
    let t = t.trim_start_matches(['(', '[']).trim_end_matches([')', ']']);
    let t = t.trim_end_matches(|c: char| c.is_ascii_punctuation()).trim();
    let mut chars = t.chars();
    let first = chars.next()?;
    if !first.is_ascii_alphabetic() {
        return None;
    }
    match chars.next() {
        None => Some(first),
        // "B) cat" or "B. cat"
        Some(c) if !c.is_alphanumeric() => Some(first),
        Some(_) => None,
    }
}

fn action_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(str::to_uppercase)
        .collect()
}

/// Scores with an explanation flag for unparsable inputs.
pub fn score_detail(pred: Option<&str>, task: &TaskInstance) -> Score {
    let Some(pred) = pred else {
        return Score {
            correct: false,
            flag: None,
        };
    };
    let ok = |correct| Score { correct, flag: None };
    match task.answer_mode {
        AnswerMode::MultipleChoice => match (mc_letter(pred), mc_letter(&task.gold)) {
            (Some(p), Some(g)) => ok(p == g),
            (_, None) => Score {
                correct: false,
                flag: Some(format!("gold {:?} is not a choice letter", task.gold)),
            },
            (None, _) => ok(false),
        },
        AnswerMode::ExactText => {
            let norm = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
            ok(norm(pred) == norm(&task.gold))
        }
        AnswerMode::Numeric { tolerance } => {
            let parse = |s: &str| s.trim().trim_end_matches('.').parse::<f64>().ok();
            match (parse(pred), parse(&task.gold)) {
                (Some(p), Some(g)) => ok((p - g).abs() <= tolerance),
                (None, _) => Score {
                    correct: false,
                    flag: Some(format!("unparsable numeric prediction {pred:?}")),
                },
                (_, None) => Score {
                    correct: false,
                    flag: Some(format!("unparsable numeric gold {:?}", task.gold)),
                },
            }
        }
        AnswerMode::ActionSequence => ok(action_tokens(pred) == action_tokens(&task.gold)),
    }
}

pub fn score_answer(pred: Option<&str>, task: &TaskInstance) -> bool {
    score_detail(pred, task).correct
}

// ---------------------------------------------------------------------------
// reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub id: String,
    pub family: String,
    pub capability_labels: Vec<Capability>,
    pub correct: bool,
    pub answer: Option<String>,
    pub gold: String,
    pub turns: u32,
    pub termination: Termination,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub crashed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupScore {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

impl GroupScore {
    fn add(&mut self, correct: bool) {
        self.total += 1;
        self.correct += usize::from(correct);
        self.accuracy = self.correct as f64 / self.total as f64;
    }
}

impl Default for GroupScore {
    fn default() -> Self {
        Self {
            correct: 0,
            total: 0,
            accuracy: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: RunMode,
    pub mode_label: String,
    pub provider: String,
    pub task_count: usize,
    pub correct_count: usize,
    pub overall: f64,
    pub per_family: BTreeMap<String, GroupScore>,
    pub per_capability: BTreeMap<Capability, GroupScore>,
    pub crashed: usize,
    pub rows: Vec<TaskRow>,
}

impl EvalReport {
    /// Aggregates per-task rows. A task with k capability labels counts in k groups.
    pub fn from_rows(mode: RunMode, provider: &str, rows: Vec<TaskRow>) -> Self {
        let mut per_family: BTreeMap<String, GroupScore> = BTreeMap::new();
        let mut per_capability: BTreeMap<Capability, GroupScore> = BTreeMap::new();
        for row in &rows {
            per_family.entry(row.family.clone()).or_default().add(row.correct);
            for c in &row.capability_labels {
                per_capability.entry(*c).or_default().add(row.correct);
            }
        }
        let correct_count = rows.iter().filter(|r| r.correct).count();
        let task_count = rows.len();
        Self {
            mode_label: mode.to_string(),
            mode,
            provider: provider.to_string(),
            task_count,
            correct_count,
            overall: if task_count == 0 {
                0.0
            } else {
                correct_count as f64 / task_count as f64
            },
            per_family,
            per_capability,
            crashed: rows.iter().filter(|r| r.crashed).count(),
            rows,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "mode: {}   provider: {}\noverall: {:.4} ({}/{})\n",
            self.mode_label, self.provider, self.overall, self.correct_count, self.task_count
        );
        if self.crashed > 0 {
            out.push_str(&format!("crashed tasks: {}\n", self.crashed));
        }
        out.push_str("\nfamily               correct  total  accuracy\n");
        for (family, g) in &self.per_family {
            out.push_str(&format!(
                "{:<20} {:>7}  {:>5}  {:>8.4}\n",
                family, g.correct, g.total, g.accuracy
            ));
        }
        out.push_str("\ncapability           correct  total  accuracy\n");
        for (cap, g) in &self.per_capability {
            out.push_str(&format!(
                "{:<20} {:>7}  {:>5}  {:>8.4}\n",
                cap.id(),
                g.correct,
                g.total,
                g.accuracy
            ));
        }
        out.push_str("\ntask                 ok  turns  termination  answer\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<20} {:<3} {:>5}  {:<12} {}\n",
                r.id,
                if r.correct { "yes" } else { "no" },
                r.turns,
                format!("{:?}", r.termination),
                r.answer.as_deref().unwrap_or("-")
            ));
        }
        out
    }
}

/// Side-by-side overall and per-capability accuracy of several reports.
pub fn comparison_table(reports: &[&EvalReport]) -> String {
    let mut out = format!("{:<24}", "");
    for r in reports {
        out.push_str(&format!(" {:>16}", r.mode_label));
    }
    out.push('\n');
    out.push_str(&format!("{:<24}", "overall"));
    for r in reports {
        out.push_str(&format!(" {:>16.4}", r.overall));
    }
    out.push('\n');
    for cap in Capability::ALL {
        out.push_str(&format!("{:<24}", cap.id()));
        for r in reports {
            match r.per_capability.get(&cap) {
                Some(g) => out.push_str(&format!(" {:>16.4}", g.accuracy)),
                None => out.push_str(&format!(" {:>16}", "-")),
            }
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// benchmark runs

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("task set is empty")]
    EmptyTaskSet,
    #[error("invalid run config: {0}")]
    InvalidConfig(String),
}

/// Receives each trace as soon as its session finishes, on the worker thread.
pub trait TraceSink: Sync {
    fn write(&self, trace: &TraceRecord) -> Result<(), String>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRun {
    pub report: EvalReport,
    /// In task order; crashed tasks have no trace.
    pub traces: Vec<TraceRecord>,
}

fn row_for(task: &TaskInstance, result: &SessionResult) -> TaskRow {
    let score = score_detail(result.answer.as_deref(), task);
    TaskRow {
        id: task.id.clone(),
        family: task.family.clone(),
        capability_labels: task.capability_labels.iter().copied().collect(),
        correct: score.correct,
        answer: result.answer.clone(),
        gold: task.gold.clone(),
        turns: result.turns_used,
        termination: result.termination,
        flags: score.flag.into_iter().collect(),
        crashed: false,
    }
}

fn crashed_row(task: &TaskInstance, detail: String) -> TaskRow {
    TaskRow {
        id: task.id.clone(),
        family: task.family.clone(),
        capability_labels: task.capability_labels.iter().copied().collect(),
        correct: false,
        answer: None,
        gold: task.gold.clone(),
        turns: 0,
        termination: Termination::Aborted,
        flags: vec![detail],
        crashed: true,
    }
}

fn panic_message(payload: Box<dyn std::any::Any + Send>) -> String {
    payload
        .downcast_ref::<String>()
        .cloned()
        .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "unknown panic".into())
}

/// Runs every task with at most `parallelism` concurrent sessions.
pub fn run_benchmark(
    tasks: &[TaskInstance],
    factory: &dyn ProviderFactory,
    runtime: &ToolRuntime,
    config: &RunConfig,
    parallelism: usize,
    sink: Option<&dyn TraceSink>,
) -> Result<BenchmarkRun, EvalError> {
    if tasks.is_empty() {
        return Err(EvalError::EmptyTaskSet);
    }
    config
        .validate()
        .map_err(|e| EvalError::InvalidConfig(e.to_string()))?;

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<(TaskRow, Option<TraceRecord>)>>> =
        Mutex::new(vec![None; tasks.len()]);
    let workers = parallelism.clamp(1, tasks.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(task) = tasks.get(i) else { break };
                let outcome = catch_unwind(AssertUnwindSafe(|| {
                    let mut provider = factory.create(task).map_err(|e| format!("provider: {e}"))?;
                    Ok::<_, String>(run_session(task, provider.as_mut(), runtime, config))
                }));
                let entry = match outcome {
                    Ok(Ok(result)) => {
                        let mut row = row_for(task, &result);
                        if let Some(sink) = sink {
                            if let Err(e) = sink.write(&result.trace) {
                                row.flags.push(format!("trace not written: {e}"));
                            }
                        }
                        (row, Some(result.trace))
                    }
                    Ok(Err(detail)) => (crashed_row(task, detail), None),
                    Err(panic) => {
                        let detail = format!("crashed: {}", panic_message(panic));
                        tracing::error!(task = %task.id, %detail, "session crashed");
                        (crashed_row(task, detail), None)
                    }
                };
                results.lock().expect("results lock")[i] = Some(entry);
            });
        }
    });

    let mut rows = Vec::with_capacity(tasks.len());
    let mut traces = Vec::new();
    for entry in results.into_inner().expect("results lock") {
        let (row, trace) = entry.expect("every task produces a row");
        rows.push(row);
        traces.extend(trace);
    }
    Ok(BenchmarkRun {
        report: EvalReport::from_rows(config.mode.clone(), &factory.info().name, rows),
        traces,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationSuite {
    PerCapabilityRemoval,
    FlatSelection,
}

/// One run per ablated configuration, labelled with its mode.
pub fn run_ablation(
    tasks: &[TaskInstance],
    factory: &dyn ProviderFactory,
    runtime: &ToolRuntime,
    base: &RunConfig,
    suite: AblationSuite,
    parallelism: usize,
) -> Result<Vec<BenchmarkRun>, EvalError> {
    let modes: Vec<RunMode> = match suite {
        AblationSuite::PerCapabilityRemoval => Capability::ALL.iter().map(|c| RunMode::drop(*c)).collect(),
        AblationSuite::FlatSelection => vec![RunMode::FlatSelection],
    };
    modes
        .into_iter()
        .map(|mode| {
            let config = base.clone().with_mode(mode);
            run_benchmark(tasks, factory, runtime, &config, parallelism, None)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// replay

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("replay diverged at turn {turn} ({field}): {detail}")]
pub struct ReplayDivergence {
    pub turn: u32,
    pub field: String,
    pub detail: String,
}

fn divergence(turn: u32, field: &str, detail: String) -> ReplayDivergence {
    ReplayDivergence {
        turn,
        field: field.to_string(),
        detail,
    }
}

fn outcome_label(o: &TurnOutcome) -> String {
    serde_json::to_string(o).expect("outcome serializes")
}

/// Re-runs a session with the trace's model outputs as a script and checks
/// that every turn behaves as recorded.
pub fn replay_trace(
    trace: &TraceRecord,
    runtime: &ToolRuntime,
) -> Result<SessionResult, ReplayDivergence> {
    for t in &trace.turns {
        if let (Some(obs), Some(digest)) = (&t.observation, &t.observation_digest) {
            if &obs.digest() != digest {
                return Err(divergence(
                    t.index,
                    "observation_digest",
                    "recorded digest does not match recorded observation".into(),
                ));
            }
        }
    }
    let responses: Vec<&str> = trace
        .turns
        .iter()
        .filter(|t| !matches!(t.outcome, TurnOutcome::ProviderFailed { .. }))
        .map(|t| t.raw.as_str())
        .collect();
    let mut provider = ScriptedProvider::new(ScriptedTranscript::literal(&responses))
        .with_max_context(trace.provider.max_context_tokens);
    let mut config = trace.config.clone();
    config.provider_retries = 0;
    let mut result = run_session(&trace.task, &mut provider, runtime, &config);
    result.trace.config = trace.config.clone();

    let same_prompt = result.trace.system_prompt_digest == trace.system_prompt_digest;
    for (i, original) in trace.turns.iter().enumerate() {
        let index = original.index;
        let Some(replayed) = result.trace.turns.get(i) else {
            return Err(divergence(index, "turns", "replay ended early".into()));
        };
        if outcome_label(&replayed.outcome) != outcome_label(&original.outcome) {
            return Err(divergence(
                index,
                "outcome",
                format!(
                    "recorded {} but replay gave {}",
                    outcome_label(&original.outcome),
                    outcome_label(&replayed.outcome)
                ),
            ));
        }
        if replayed.observation_digest != original.observation_digest {
            return Err(divergence(index, "observation_digest", "observation differs".into()));
        }
        if same_prompt && replayed.context_digest != original.context_digest {
            return Err(divergence(index, "context_digest", "provider input differs".into()));
        }
    }
    if result.trace.turns.len() != trace.turns.len() {
        return Err(divergence(
            result.trace.turns.len() as u32,
            "turns",
            format!("recorded {} turns, replay ran {}", trace.turns.len(), result.trace.turns.len()),
        ));
    }
    let last = trace.turns.last().map_or(0, |t| t.index);
    if result.answer != trace.answer {
        return Err(divergence(last, "answer", format!("{:?} vs {:?}", trace.answer, result.answer)));
    }
    if result.termination != trace.termination {
        return Err(divergence(
            last,
            "termination",
            format!("{:?} vs {:?}", trace.termination, result.termination),
        ));
    }
    Ok(result)
}
