//! Replayable audit log of one session.

use serde::{Deserialize, Serialize};

use crate::capability::{BindingError, Capability, ToolInvocation};
use crate::orchestrator::{RunConfig, Termination};
use crate::protocol::Segment;
use crate::provider::ProviderInfo;
use crate::session::Observation;
use crate::task::TaskInstance;

/// Why a turn was turned into a protocol-error observation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProtocolViolation {
    /// Neither an answer nor a tool call.
    NoAction,
    MissingCapability,
    MissingToolCall,
    UnknownCapability { raw: String },
    MalformedPayload { detail: String },
    Binding { error: BindingError },
    ObservationTooLarge { tokens: u64, capacity: u64 },
}

impl ProtocolViolation {
    pub fn describe(&self) -> String {
        match self {
            ProtocolViolation::NoAction => {
                "the turn contains neither <answer> nor <tool_call>".to_string()
            }
            ProtocolViolation::MissingCapability => {
                "<tool_call> without a preceding <cap> declaration".to_string()
            }
            ProtocolViolation::MissingToolCall => "<cap> declared but no <tool_call>".to_string(),
            ProtocolViolation::UnknownCapability { raw } => format!("unknown capability {raw:?}"),
            ProtocolViolation::MalformedPayload { detail } => {
                format!("malformed tool_call payload: {detail}")
            }
            ProtocolViolation::Binding { error } => format!("invalid tool call: {error}"),
            ProtocolViolation::ObservationTooLarge { tokens, capacity } => format!(
                "tool output of {tokens} tokens does not fit the context budget ({capacity})"
            ),
        }
    }

    pub fn is_capability_mismatch(&self) -> bool {
        matches!(
            self,
            ProtocolViolation::Binding {
                error: BindingError::CapabilityMismatch { .. }
            }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum TurnOutcome {
    Answered,
    ToolExecuted { tool: String },
    ToolFailed { tool: String, detail: String },
    ProtocolError { violation: ProtocolViolation },
    ProviderFailed { detail: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub index: u32,
    /// Digest of the provider input for this turn.
    pub context_digest: String,
    pub raw: String,
    pub segments: Vec<Segment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capability: Option<Capability>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub invocation: Option<ToolInvocation>,
    pub outcome: TurnOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observation: Option<Observation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observation_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub evicted: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub task_id: String,
    /// The task as run, so a trace can be replayed on its own.
    pub task: TaskInstance,
    pub config: RunConfig,
    pub provider: ProviderInfo,
    pub budget_tokens: u64,
    pub system_prompt_digest: String,
    pub turns: Vec<TurnRecord>,
    pub capability_history: Vec<Capability>,
    pub termination: Termination,
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    pub elapsed_ms: u64,
}

impl TraceRecord {
    /// Copy with all wall-clock fields zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> Self {
        let mut t = self.clone();
        t.elapsed_ms = 0;
        for turn in &mut t.turns {
            turn.elapsed_ms = 0;
        }
        t
    }

    pub fn violations(&self) -> impl Iterator<Item = &ProtocolViolation> {
        self.turns.iter().filter_map(|t| match &t.outcome {
            TurnOutcome::ProtocolError { violation } => Some(violation),
            _ => None,
        })
    }

    pub fn executed_tools(&self) -> impl Iterator<Item = &str> {
        self.turns.iter().filter_map(|t| match &t.outcome {
            TurnOutcome::ToolExecuted { tool } => Some(tool.as_str()),
            _ => None,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}
