//! The turn loop: reason, declare a capability, call one tool, fold the
//! observation back into the session, stop on an answer or the turn cap.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::capability::{
    default_capability_specs, Backend, Capability, Registry, ToolInvocation, ToolSpec,
};
use crate::images::{ImageRef, ImageStore};
use crate::protocol::{
    parse_tool_call, parse_turn, render_flat_system_prompt, render_system_prompt, ReasoningTurn,
    Tag, DEFAULT_PROTOCOL_DOC, FLAT_PROTOCOL_DOC,
};
use crate::provider::{budget_tokens, Decoding, ModelProvider, ProviderMessages};
use crate::remote::{call_remote_tool, EndpointConfig};
use crate::session::{Observation, SessionError, SessionState};
use crate::task::TaskInstance;
use crate::toolkit::{execute_local, ToolError, ToolOutput};
use crate::trace::{ProtocolViolation, TraceRecord, TurnOutcome, TurnRecord};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunMode {
    Full,
    /// No capability stage; tools are picked from one flat list.
    FlatSelection,
    /// Tools of these capabilities are hidden and rejected.
    CapabilityDisabled { capabilities: BTreeSet<Capability> },
}

impl RunMode {
    pub fn drop(capability: Capability) -> Self {
        RunMode::CapabilityDisabled {
            capabilities: BTreeSet::from([capability]),
        }
    }

    pub fn disabled(&self) -> BTreeSet<Capability> {
        match self {
            RunMode::CapabilityDisabled { capabilities } => capabilities.clone(),
            _ => BTreeSet::new(),
        }
    }

    /// Parses `full`, `flat` or `drop:<capability>[,<capability>...]`.
    pub fn parse(text: &str, registry: &Registry) -> Result<Self, String> {
        match text.trim() {
            "full" => Ok(RunMode::Full),
            "flat" => Ok(RunMode::FlatSelection),
            other => {
                let list = other
                    .strip_prefix("drop:")
                    .ok_or_else(|| format!("unknown mode {other:?}; use full, flat or drop:<capability>"))?;
                let capabilities = list
                    .split(',')
                    .map(|c| registry.canonicalize_capability(c).map_err(|e| e.to_string()))
                    .collect::<Result<BTreeSet<_>, _>>()?;
                Ok(RunMode::CapabilityDisabled { capabilities })
            }
        }
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunMode::Full => f.write_str("full"),
            RunMode::FlatSelection => f.write_str("flat"),
            RunMode::CapabilityDisabled { capabilities } => {
                let ids: Vec<&str> = capabilities.iter().map(|c| c.id()).collect();
                write!(f, "drop:{}", ids.join(","))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub max_turn: u32,
    pub temperature: f64,
    pub top_p: f64,
    pub budget_fraction: f64,
    pub max_output: u32,
    pub mode: RunMode,
    pub provider_retries: u32,
    pub retry_backoff_ms: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            max_turn: 10,
            temperature: 0.3,
            top_p: 1.0,
            budget_fraction: 0.6,
            max_output: 4096,
            mode: RunMode::Full,
            provider_retries: 2,
            retry_backoff_ms: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("max_turn must be at least 1")]
    MaxTurn,
    #[error("temperature must be non-negative")]
    Temperature,
    #[error("top_p must be in (0, 1]")]
    TopP,
    #[error("budget_fraction must be in (0, 1]")]
    BudgetFraction,
}

impl RunConfig {
    pub fn with_mode(mut self, mode: RunMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_turn < 1 {
            return Err(ConfigError::MaxTurn);
        }
        if !(self.temperature >= 0.0) {
            return Err(ConfigError::Temperature);
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(ConfigError::TopP);
        }
        if !(self.budget_fraction > 0.0 && self.budget_fraction <= 1.0) {
            return Err(ConfigError::BudgetFraction);
        }
        Ok(())
    }

    pub fn decoding(&self) -> Decoding {
        Decoding {
            temperature: self.temperature,
            top_p: self.top_p,
            max_output: self.max_output,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Answered,
    TurnLimit,
    ProviderError,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionResult {
    pub answer: Option<String>,
    pub turns_used: u32,
    pub termination: Termination,
    pub trace: TraceRecord,
}

/// Everything a session needs to execute tools. Shared read-only across sessions.
#[derive(Debug)]
pub struct ToolRuntime {
    pub registry: Registry,
    pub images: Arc<ImageStore>,
    pub endpoints: Vec<EndpointConfig>,
}

impl ToolRuntime {
    pub fn new(registry: Registry, images: Arc<ImageStore>) -> Self {
        Self {
            registry,
            images,
            endpoints: Vec::new(),
        }
    }

    pub fn with_endpoints(mut self, endpoints: Vec<EndpointConfig>) -> Self {
        self.endpoints = endpoints;
        self
    }

    /// Tools the model may see under `mode`.
    pub fn visible_tools(&self, mode: &RunMode) -> Vec<&ToolSpec> {
        let disabled = mode.disabled();
        self.registry
            .flat_toolset()
            .into_iter()
            .filter(|t| !disabled.contains(&t.capability))
            .filter(|t| self.registry.unavailable_reason(&t.name).is_none())
            .collect()
    }

    pub fn system_prompt(&self, mode: &RunMode) -> String {
        let tools = self.visible_tools(mode);
        match mode {
            RunMode::FlatSelection => render_flat_system_prompt(&tools, FLAT_PROTOCOL_DOC),
            _ => render_system_prompt(&default_capability_specs(), &tools, DEFAULT_PROTOCOL_DOC)
                .expect("all six capabilities are listed"),
        }
    }
}

/// Runs a validated invocation. Local tools run in-process, Remote ones over
/// the wire; every failure comes back as a [`ToolError`].
pub fn execute_tool(invocation: &ToolInvocation, runtime: &ToolRuntime) -> Result<ToolOutput, ToolError> {
    let spec = runtime
        .registry
        .get(&invocation.tool)
        .ok_or_else(|| ToolError::new(format!("unknown tool {}", invocation.tool)))?;
    if let Some(reason) = runtime.registry.unavailable_reason(&spec.name) {
        return Err(ToolError::new(format!("tool unavailable: {reason}")));
    }
    match &spec.backend {
        Backend::Local => execute_local(spec, invocation, &runtime.images),
        Backend::Remote { endpoint } => {
            let ep = runtime
                .endpoints
                .iter()
                .find(|e| &e.name == endpoint)
                .ok_or_else(|| ToolError::new(format!("endpoint {endpoint} not configured")))?;
            let refs = invocation
                .image_refs
                .iter()
                .map(|id| {
                    runtime
                        .images
                        .get(id)
                        .map(|s| s.reference.clone())
                        .map_err(|e| ToolError::new(e.to_string()))
                })
                .collect::<Result<Vec<ImageRef>, _>>()?;
            call_remote_tool(ep, &spec.name, &invocation.arguments, &refs, &runtime.images)
                .map_err(|e| ToolError::new(e.to_string()))
        }
    }
}

/// Inner text of the first answer in the terminal turn.
pub fn extract_final_answer(trace: &TraceRecord) -> Option<String> {
    let last = trace.turns.last()?;
    if last.outcome != TurnOutcome::Answered {
        return None;
    }
    parse_turn(&last.raw, last.index).answer().map(str::to_string)
}

fn sha_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

enum Action {
    Invoke(ToolInvocation),
    Reject(ProtocolViolation),
}

/// Decodes the action of a non-terminal turn, applying the capability stage
/// unless the mode is flat.
fn decide(turn: &ReasoningTurn, runtime: &ToolRuntime, mode: &RunMode) -> (Option<Capability>, Action) {
    let cap = turn.inner(Tag::Cap);
    let call = turn.inner(Tag::ToolCall);
    let flat = *mode == RunMode::FlatSelection;

    let declared = match (flat, cap, call) {
        (_, None, None) => return (None, Action::Reject(ProtocolViolation::NoAction)),
        (false, Some(_), None) | (true, _, None) => {
            return (None, Action::Reject(ProtocolViolation::MissingToolCall))
        }
        (false, None, Some(_)) => {
            return (None, Action::Reject(ProtocolViolation::MissingCapability))
        }
        (true, _, Some(_)) => None,
        (false, Some(raw), Some(_)) => match runtime.registry.canonicalize_capability(raw) {
            Ok(c) => Some(c),
            Err(_) => {
                return (
                    None,
                    Action::Reject(ProtocolViolation::UnknownCapability {
                        raw: raw.to_string(),
                    }),
                )
            }
        },
    };
    let payload = match parse_tool_call(call.unwrap_or_default()) {
        Ok(p) => p,
        Err(e) => {
            return (
                declared,
                Action::Reject(ProtocolViolation::MalformedPayload { detail: e.0 }),
            )
        }
    };
    let invocation = ToolInvocation {
        tool: payload.name,
        arguments: payload.arguments,
        image_refs: payload.images,
        declared_capability: declared,
    };
    let checked = if flat {
        runtime.registry.validate_arguments(&invocation)
    } else {
        runtime.registry.validate_binding(&invocation)
    };
    let spec = match checked {
        Ok(spec) => spec,
        Err(error) => return (declared, Action::Reject(ProtocolViolation::Binding { error })),
    };
    if mode.disabled().contains(&spec.capability) {
        let error = crate::capability::BindingError::CapabilityDisabled {
            capability: spec.capability,
        };
        return (declared, Action::Reject(ProtocolViolation::Binding { error }));
    }
    (declared, Action::Invoke(invocation))
}

fn complete_with_retry(
    provider: &mut dyn ModelProvider,
    messages: &ProviderMessages,
    config: &RunConfig,
    notes: &mut Vec<String>,
) -> Result<String, String> {
    let decoding = config.decoding();
    let mut attempt = 0;
    loop {
        match provider.complete(messages, &decoding) {
            Ok(text) => return Ok(text),
            Err(e) if e.is_retryable() && attempt < config.provider_retries => {
                let wait = config.retry_backoff_ms.saturating_mul(1 << attempt);
                notes.push(format!("provider attempt {} failed: {e}; retrying", attempt + 1));
                tracing::warn!(error = %e, wait_ms = wait, "provider call failed, retrying");
                std::thread::sleep(Duration::from_millis(wait));
                attempt += 1;
            }
            Err(e) => return Err(e.to_string()),
        }
    }
}

/// Runs one task to completion. Never panics on model misbehaviour; every
/// protocol or tool failure becomes an observation and consumes the turn.
pub fn run_session(
    task: &TaskInstance,
    provider: &mut dyn ModelProvider,
    runtime: &ToolRuntime,
    config: &RunConfig,
) -> SessionResult {
    let started = Instant::now();
    let info = provider.info();
    let budget = budget_tokens(config.budget_fraction, info.max_context_tokens);
    let system_prompt = runtime.system_prompt(&config.mode);
    let mut trace = TraceRecord {
        task_id: task.id.clone(),
        task: task.clone(),
        config: config.clone(),
        provider: info,
        budget_tokens: budget,
        system_prompt_digest: sha_hex(&system_prompt),
        turns: Vec::new(),
        capability_history: Vec::new(),
        termination: Termination::Aborted,
        answer: None,
        notes: Vec::new(),
        elapsed_ms: 0,
    };
    let finish = |mut trace: TraceRecord, termination: Termination, answer: Option<String>| {
        trace.termination = termination;
        trace.answer = answer.clone();
        trace.elapsed_ms = started.elapsed().as_millis() as u64;
        SessionResult {
            answer,
            turns_used: trace.turns.len() as u32,
            termination,
            trace,
        }
    };

    if let Err(e) = config.validate() {
        trace.notes.push(format!("invalid run config: {e}"));
        return finish(trace, Termination::Aborted, None);
    }
    let mut state = match SessionState::init(task, budget) {
        Ok(s) => s,
        Err(e) => {
            trace.notes.push(format!("cannot start session: {e}"));
            return finish(trace, Termination::Aborted, None);
        }
    };

    for i in 1..=config.max_turn {
        let turn_started = Instant::now();
        let messages = state.serialize_context(&system_prompt);
        let context_digest = messages.digest();
        let mut notes = Vec::new();

        let raw = match complete_with_retry(provider, &messages, config, &mut notes) {
            Ok(raw) => raw,
            Err(detail) => {
                trace.turns.push(TurnRecord {
                    index: i,
                    context_digest,
                    raw: String::new(),
                    segments: Vec::new(),
                    capability: None,
                    invocation: None,
                    outcome: TurnOutcome::ProviderFailed { detail },
                    observation: None,
                    observation_digest: None,
                    evicted: Vec::new(),
                    notes,
                    elapsed_ms: turn_started.elapsed().as_millis() as u64,
                });
                return finish(trace, Termination::ProviderError, None);
            }
        };

        let turn = parse_turn(&raw, i);
        for d in &turn.duplicates {
            notes.push(format!("ignored extra <{}> at byte {}", d.tag.name(), d.span.start));
        }
        let mut evicted = state.record_turn(turn.clone());
        let mut record = TurnRecord {
            index: i,
            context_digest,
            raw: raw.clone(),
            segments: turn.segments.clone(),
            capability: None,
            invocation: None,
            outcome: TurnOutcome::Answered,
            observation: None,
            observation_digest: None,
            evicted: Vec::new(),
            notes,
            elapsed_ms: 0,
        };

        if turn.terminal {
            if turn.has(Tag::ToolCall) {
                record.notes.push("tool call not executed: answer takes precedence".into());
            }
            let answer = turn.answer().map(str::to_string);
            record.evicted = evicted;
            record.elapsed_ms = turn_started.elapsed().as_millis() as u64;
            trace.turns.push(record);
            return finish(trace, Termination::Answered, answer);
        }

        let (declared, action) = decide(&turn, runtime, &config.mode);
        record.capability = declared;
        let observation = match action {
            Action::Reject(violation) => {
                let obs = Observation::protocol_error(violation.describe());
                record.outcome = TurnOutcome::ProtocolError { violation };
                obs
            }
            Action::Invoke(invocation) => {
                let bound = runtime
                    .registry
                    .get(&invocation.tool)
                    .map(|s| s.capability)
                    .expect("validated tool exists");
                state.record_capability(bound);
                trace.capability_history.push(bound);
                let result = execute_tool(&invocation, runtime);
                let tool = invocation.tool.clone();
                record.invocation = Some(invocation);
                match result {
                    Ok(out) => {
                        record.outcome = TurnOutcome::ToolExecuted { tool: tool.clone() };
                        Observation::tool(&tool, out.text, out.images)
                    }
                    Err(e) => {
                        record.outcome = TurnOutcome::ToolFailed {
                            tool: tool.clone(),
                            detail: e.0.clone(),
                        };
                        Observation::protocol_error(format!("tool {tool} failed: {}", e.0))
                    }
                }
            }
        };

        let observation = match state.append_observation(&observation, i) {
            Ok(ev) => {
                evicted.extend(ev);
                observation
            }
            Err(SessionError::ObservationTooLarge { tokens, capacity }) => {
                let violation = ProtocolViolation::ObservationTooLarge { tokens, capacity };
                let obs = Observation::protocol_error(violation.describe());
                record.notes.push(format!("observation dropped: {}", violation.describe()));
                evicted.extend(state.append_observation(&obs, i).unwrap_or_default());
                obs
            }
            Err(e) => {
                record.notes.push(format!("observation dropped: {e}"));
                observation
            }
        };
        record.observation_digest = Some(observation.digest());
        record.observation = Some(observation);
        record.evicted = evicted;
        record.elapsed_ms = turn_started.elapsed().as_millis() as u64;
        trace.turns.push(record);
    }
    finish(trace, Termination::TurnLimit, None)
}
