//! The tag protocol that structures every model turn:
//! `<think>…</think>`, `<cap>…</cap>`, `<tool_call>…</tool_call>` and
//! `<answer>…</answer>`.
//!
//! Tags are matched case-sensitively and never nest: once an opening tag is
//! seen, everything up to the first matching closing tag is its body. Only the
//! first well-formed region of each kind becomes a tagged segment; later ones
//! are kept as plain text and reported in [`ReasoningTurn::duplicates`].
//! Parsing is total and lossless.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::capability::{Capability, CapabilitySpec, ToolSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tag {
    Think,
    Cap,
    ToolCall,
    Answer,
}

impl Tag {
    pub const ALL: [Tag; 4] = [Tag::Think, Tag::Cap, Tag::ToolCall, Tag::Answer];

    pub fn name(self) -> &'static str {
        match self {
            Tag::Think => "think",
            Tag::Cap => "cap",
            Tag::ToolCall => "tool_call",
            Tag::Answer => "answer",
        }
    }

    pub fn open(self) -> &'static str {
        match self {
            Tag::Think => "<think>",
            Tag::Cap => "<cap>",
            Tag::ToolCall => "<tool_call>",
            Tag::Answer => "<answer>",
        }
    }

    pub fn close(self) -> &'static str {
        match self {
            Tag::Think => "</think>",
            Tag::Cap => "</cap>",
            Tag::ToolCall => "</tool_call>",
            Tag::Answer => "</answer>",
        }
    }

    pub fn wrap(self, inner: &str) -> String {
        format!("{}{}{}", self.open(), inner, self.close())
    }
}

/// Byte range `[start, end)` into the source turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "text", rename_all = "snake_case")]
pub enum SegmentKind {
    Think(String),
    Cap(String),
    ToolCall(String),
    Answer(String),
    Plain(String),
}

impl SegmentKind {
    pub fn tag(&self) -> Option<Tag> {
        match self {
            SegmentKind::Think(_) => Some(Tag::Think),
            SegmentKind::Cap(_) => Some(Tag::Cap),
            SegmentKind::ToolCall(_) => Some(Tag::ToolCall),
            SegmentKind::Answer(_) => Some(Tag::Answer),
            SegmentKind::Plain(_) => None,
        }
    }

    /// Untrimmed inner text (the whole text for `Plain`).
    pub fn text(&self) -> &str {
        match self {
            SegmentKind::Think(s)
            | SegmentKind::Cap(s)
            | SegmentKind::ToolCall(s)
            | SegmentKind::Answer(s)
            | SegmentKind::Plain(s) => s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    #[serde(flatten)]
    pub kind: SegmentKind,
    pub span: Span,
}

impl Segment {
    /// The exact source text this segment was parsed from.
    pub fn render(&self) -> String {
        match self.kind.tag() {
            Some(tag) => tag.wrap(self.kind.text()),
            None => self.kind.text().to_string(),
        }
    }
}

/// A well-formed tagged region that lost to an earlier one of the same kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuplicateTag {
    pub tag: Tag,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningTurn {
    pub index: u32,
    pub raw: String,
    pub segments: Vec<Segment>,
    pub terminal: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub duplicates: Vec<DuplicateTag>,
}

impl ReasoningTurn {
    pub fn first(&self, tag: Tag) -> Option<&Segment> {
        self.segments.iter().find(|s| s.kind.tag() == Some(tag))
    }

    /// Trimmed inner text of the first segment of kind `tag`.
    pub fn inner(&self, tag: Tag) -> Option<&str> {
        self.first(tag).map(|s| s.kind.text().trim())
    }

    pub fn answer(&self) -> Option<&str> {
        self.inner(Tag::Answer)
    }

    pub fn has(&self, tag: Tag) -> bool {
        self.first(tag).is_some()
    }

    /// Concatenation of all segments; equals `raw`.
    pub fn reassemble(&self) -> String {
        self.segments.iter().map(Segment::render).collect()
    }
}

/// Finds the next well-formed tagged region at or after `from`.
fn next_region(raw: &str, from: usize) -> Option<(Tag, usize, usize, usize)> {
    let mut cursor = from;
    while let Some(rel) = raw[cursor..].find('<') {
        let at = cursor + rel;
        let rest = &raw[at..];
        if let Some(tag) = Tag::ALL.into_iter().find(|t| rest.starts_with(t.open())) {
            let body_start = at + tag.open().len();
            if let Some(close_rel) = raw[body_start..].find(tag.close()) {
                let body_end = body_start + close_rel;
                return Some((tag, at, body_start, body_end));
            }
        }
        cursor = at + 1;
    }
    None
}

/// Decomposes one model turn into segments. Never fails.
pub fn parse_turn(raw: &str, index: u32) -> ReasoningTurn {
    let mut segments = Vec::new();
    let mut duplicates = Vec::new();
    let mut seen = BTreeSet::new();
    let mut plain_start = 0usize;
    let mut cursor = 0usize;

    while let Some((tag, start, body_start, body_end)) = next_region(raw, cursor) {
        let end = body_end + tag.close().len();
        if !seen.insert(tag) {
            tracing::debug!(tag = tag.name(), start, "duplicate tag kept as plain text");
            duplicates.push(DuplicateTag {
                tag,
                span: Span { start, end },
            });
            cursor = end;
            continue;
        }
        if plain_start < start {
            segments.push(Segment {
                kind: SegmentKind::Plain(raw[plain_start..start].to_string()),
                span: Span {
                    start: plain_start,
                    end: start,
                },
            });
        }
        let body = raw[body_start..body_end].to_string();
        let kind = match tag {
            Tag::Think => SegmentKind::Think(body),
            Tag::Cap => SegmentKind::Cap(body),
            Tag::ToolCall => SegmentKind::ToolCall(body),
            Tag::Answer => SegmentKind::Answer(body),
        };
        segments.push(Segment {
            kind,
            span: Span { start, end },
        });
        plain_start = end;
        cursor = end;
    }
    if plain_start < raw.len() {
        segments.push(Segment {
            kind: SegmentKind::Plain(raw[plain_start..].to_string()),
            span: Span {
                start: plain_start,
                end: raw.len(),
            },
        });
    }

    let terminal = segments
        .iter()
        .any(|s| matches!(s.kind, SegmentKind::Answer(_)));
    ReasoningTurn {
        index: index.max(1),
        raw: raw.to_string(),
        segments,
        terminal,
        duplicates,
    }
}

/// Trimmed inner text of the first well-formed `tag` region, if any.
pub fn extract_between(raw: &str, tag: Tag) -> Option<String> {
    parse_turn(raw, 1).inner(tag).map(str::to_string)
}

/// Decoded `<tool_call>` payload:
/// `{"name": <tool>, "arguments": {...}, "images": [<image-id>...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolCallPayload {
    pub name: String,
    #[serde(default)]
    pub arguments: Map<String, Value>,
    #[serde(default)]
    pub images: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed tool_call payload: {0}")]
pub struct PayloadError(pub String);

pub fn parse_tool_call(body: &str) -> Result<ToolCallPayload, PayloadError> {
    let trimmed = body.trim();
    let value: Value = serde_json::from_str(trimmed).map_err(|e| PayloadError(e.to_string()))?;
    if !value.is_object() {
        return Err(PayloadError("payload must be a JSON object".into()));
    }
    let payload: ToolCallPayload =
        serde_json::from_value(value).map_err(|e| PayloadError(e.to_string()))?;
    if payload.name.trim().is_empty() {
        return Err(PayloadError("empty tool name".into()));
    }
    Ok(payload)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("tool {tool:?} is bound to {capability}, which is not listed")]
    UnknownCapabilityBinding { tool: String, capability: Capability },
}

/// Opening line of the capability-first instruction block.
pub const SELECTION_INSTRUCTION: &str = "Work in turns. In every turn you must (i) first select a capability, \
(ii) then call exactly one tool from that capability's toolset, and \
(iii) fold what the tool returned into your reasoning before you commit to a final answer.";

pub const DEFAULT_PROTOCOL_DOC: &str = "\
Format every turn with these tags and nothing else around them:
<think>your private reasoning for this step</think>
<cap>the capability name, exactly as written in a section header</cap>
<tool_call>{\"name\": \"<tool>\", \"arguments\": {...}, \"images\": [\"<image-id>\"]}</tool_call>
When you are done, reply with <think>...</think><answer>final answer</answer> instead of a tool call.
Tool results come back as observations that reference any new images by id.";

/// Renders the system prompt listing each capability with its admissible tools.
///
/// Capabilities are rendered in the given order; tools appear under their
/// bound capability in the given order.
pub fn render_system_prompt(
    capabilities: &[CapabilitySpec],
    tools: &[&ToolSpec],
    protocol_doc: &str,
) -> Result<String, PromptError> {
    let listed: BTreeSet<Capability> = capabilities.iter().map(|c| c.id).collect();
    if let Some(t) = tools.iter().find(|t| !listed.contains(&t.capability)) {
        return Err(PromptError::UnknownCapabilityBinding {
            tool: t.name.clone(),
            capability: t.capability,
        });
    }

    let mut out = String::new();
    out.push_str("You are a multimodal reasoning agent that solves visual tasks step by step.\n");
    out.push_str(SELECTION_INSTRUCTION);
    out.push_str("\n\n# Capabilities\n");
    for cap in capabilities {
        out.push_str(&format!("\n## {}\n{}\n", cap.display_name, cap.description));
        let bound: Vec<&&ToolSpec> = tools.iter().filter(|t| t.capability == cap.id).collect();
        if bound.is_empty() {
            out.push_str("Tools: none available.\n");
            continue;
        }
        out.push_str("Tools:\n");
        for t in bound {
            push_tool_line(&mut out, t);
        }
    }
    out.push_str("\n# Protocol\n");
    out.push_str(protocol_doc);
    out.push('\n');
    Ok(out)
}

pub const FLAT_INSTRUCTION: &str = "Work in turns. In every turn call exactly one tool from the list below, \
then use what it returned before you commit to a final answer.";

pub const FLAT_PROTOCOL_DOC: &str = "\
Format every turn with these tags and nothing else around them:
<think>your private reasoning for this step</think>
<tool_call>{\"name\": \"<tool>\", \"arguments\": {...}, \"images\": [\"<image-id>\"]}</tool_call>
When you are done, reply with <think>...</think><answer>final answer</answer> instead of a tool call.";

/// System prompt for the flat-selection ablation: one undifferentiated tool list.
pub fn render_flat_system_prompt(tools: &[&ToolSpec], protocol_doc: &str) -> String {
    let mut out = String::new();
    out.push_str("You are a multimodal reasoning agent that solves visual tasks step by step.\n");
    out.push_str(FLAT_INSTRUCTION);
    out.push_str("\n\n# Tools\n");
    for t in tools {
        push_tool_line(&mut out, t);
    }
    out.push_str("\n# Protocol\n");
    out.push_str(protocol_doc);
    out.push('\n');
    out
}

fn push_tool_line(out: &mut String, t: &ToolSpec) {
    out.push_str(&format!("- {}: {} Parameters: {}\n", t.name, t.description, t.schema_line()));
}
