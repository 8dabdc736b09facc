use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    Decoding, ModelProvider, ProviderError, ProviderFactory, ProviderInfo, ProviderMessages,
    DEFAULT_MAX_CONTEXT,
};
use crate::task::TaskInstance;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_context_digest: Option<String>,
    /// When set, `{{obs:key}}` is filled from the `key=value` lines of the
    /// latest observation and `{{input:N}}` with the id of the N-th input
    /// image. Unresolvable placeholders become empty.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub templated: bool,
}

impl ScriptEntry {
    pub fn literal(response: impl Into<String>) -> Self {
        Self {
            response: response.into(),
            expected_context_digest: None,
            templated: false,
        }
    }

    pub fn templated(response: impl Into<String>) -> Self {
        Self {
            templated: true,
            ..Self::literal(response)
        }
    }

    pub fn pinned(mut self, digest: impl Into<String>) -> Self {
        self.expected_context_digest = Some(digest.into());
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedTranscript {
    pub entries: Vec<ScriptEntry>,
}

impl ScriptedTranscript {
    pub fn literal<S: AsRef<str>>(responses: &[S]) -> Self {
        Self {
            entries: responses
                .iter()
                .map(|r| ScriptEntry::literal(r.as_ref()))
                .collect(),
        }
    }
}

fn fill_template(template: &str, messages: &ProviderMessages) -> String {
    let fields = messages.last_observation_fields();
    let inputs = messages.input_image_ids();
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let Some(end) = after.find("}}") else {
            out.push_str(&rest[start..]);
            rest = "";
            break;
        };
        let body = &after[..end];
        match body.split_once(':') {
            Some(("obs", key)) => {
                if let Some((_, v)) = fields.iter().find(|(k, _)| k == key) {
                    out.push_str(v);
                }
            }
            Some(("input", n)) => {
                if let Some(id) = n.parse::<usize>().ok().and_then(|n| inputs.get(n)) {
                    out.push_str(id);
                }
            }
            _ => out.push_str(&rest[start..start + 4 + end]),
        }
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    out
}

/// Deterministic stand-in for the model: replays a transcript in order.
#[derive(Debug, Clone)]
pub struct ScriptedProvider {
    transcript: ScriptedTranscript,
    cursor: usize,
    max_context_tokens: u64,
}

impl ScriptedProvider {
    pub fn new(transcript: ScriptedTranscript) -> Self {
        Self {
            transcript,
            cursor: 0,
            max_context_tokens: DEFAULT_MAX_CONTEXT,
        }
    }

    pub fn with_max_context(mut self, tokens: u64) -> Self {
        self.max_context_tokens = tokens;
        self
    }

    pub fn consumed(&self) -> usize {
        self.cursor
    }
}

impl ModelProvider for ScriptedProvider {
    fn info(&self) -> ProviderInfo {
        ProviderInfo {
            name: "scripted".to_string(),
            max_context_tokens: self.max_context_tokens,
        }
    }

    fn complete(
        &mut self,
        messages: &ProviderMessages,
        _decoding: &Decoding,
    ) -> Result<String, ProviderError> {
        let Some(entry) = self.transcript.entries.get(self.cursor) else {
            return Err(ProviderError::ScriptExhausted {
                consumed: self.cursor,
            });
        };
        if let Some(expected) = &entry.expected_context_digest {
            let actual = messages.digest();
            if &actual != expected {
                return Err(ProviderError::ScriptMismatch {
                    entry: self.cursor + 1,
                    expected: expected.clone(),
                    actual,
                });
            }
        }
        self.cursor += 1;
        Ok(if entry.templated {
            fill_template(&entry.response, messages)
        } else {
            entry.response.clone()
        })
    }
}

/// Per-task transcripts keyed by task id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptBook {
    #[serde(default = "default_max_context")]
    pub max_context_tokens: u64,
    pub scripts: BTreeMap<String, ScriptedTranscript>,
}

fn default_max_context() -> u64 {
    DEFAULT_MAX_CONTEXT
}

impl ScriptBook {
    pub fn new(scripts: BTreeMap<String, ScriptedTranscript>) -> Self {
        Self {
            max_context_tokens: DEFAULT_MAX_CONTEXT,
            scripts,
        }
    }

    pub fn load(path: &Path) -> Result<Self, ProviderError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ProviderError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| ProviderError::Config(format!("{}: {e}", path.display())))
    }
}

impl ProviderFactory for ScriptBook {
    fn info(&self) -> ProviderInfo {
        ProviderInfo {
            name: "scripted".to_string(),
            max_context_tokens: self.max_context_tokens,
        }
    }

    fn create(&self, task: &TaskInstance) -> Result<Box<dyn ModelProvider>, ProviderError> {
        let transcript = self
            .scripts
            .get(&task.id)
            .cloned()
            .ok_or_else(|| ProviderError::Config(format!("no script for task {}", task.id)))?;
        Ok(Box::new(
            ScriptedProvider::new(transcript).with_max_context(self.max_context_tokens),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::{Message, Role};

    fn ctx(text: &str) -> ProviderMessages {
        let mut m = ProviderMessages::new("sys");
        m.push(Message {
            role: Role::User,
            text: text.into(),
            images: vec![],
        });
        m
    }

    #[test]
    fn replays_in_order_then_exhausts() {
        let mut p = ScriptedProvider::new(ScriptedTranscript::literal(&["<answer>B</answer>", "x"]));
        let d = Decoding::default();
        assert_eq!(p.complete(&ctx("a"), &d).unwrap(), "<answer>B</answer>");
        assert_eq!(p.complete(&ctx("a"), &d).unwrap(), "x");
        assert_eq!(
            p.complete(&ctx("a"), &d),
            Err(ProviderError::ScriptExhausted { consumed: 2 })
        );
        assert_eq!(p.info().max_context_tokens, 128_000);
    }

    #[test]
    fn digest_pinning_detects_mutation() {
        let good = ctx("task");
        let entry = ScriptEntry::literal("ok").pinned(good.digest());
        let mut p = ScriptedProvider::new(ScriptedTranscript {
            entries: vec![entry.clone()],
        });
        let d = Decoding::default();
        assert!(matches!(
            p.complete(&ctx("task!"), &d),
            Err(ProviderError::ScriptMismatch { entry: 1, .. })
        ));
        // a mismatch does not consume the entry
        assert_eq!(p.complete(&good, &d).unwrap(), "ok");
    }

    #[test]
    fn templates_read_latest_observation() {
        let m = ctx("Observation (turn 2):\npath=L,U\nlength=2");
        assert_eq!(fill_template("<answer>{{obs:path}}</answer>", &m), "<answer>L,U</answer>");
        assert_eq!(fill_template("[{{obs:nope}}]", &m), "[]");
        assert_eq!(fill_template("{{obs:path", &m), "{{obs:path");
        assert_eq!(fill_template("{{other}} {{input:0}}", &m), "{{other}} ");
        let mut with_image = ProviderMessages::new("sys");
        with_image.push(Message {
            role: Role::User,
            text: "input image img-a (4x4)".into(),
            images: vec![crate::images::ImageRef { id: "img-a".into(), width: 4, height: 4 }],
        });
        assert_eq!(fill_template("[\"{{input:0}}\"]", &with_image), "[\"img-a\"]");
        let mut p = ScriptedProvider::new(ScriptedTranscript {
            entries: vec![ScriptEntry::literal("{{obs:path}}")],
        });
        assert_eq!(p.complete(&m, &Decoding::default()).unwrap(), "{{obs:path}}");
    }
}
