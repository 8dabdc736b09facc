//! The reasoning model behind a completion interface.

mod http;
mod scripted;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::images::ImageRef;
use crate::task::TaskInstance;

pub use http::{HttpChatConfig, HttpChatFactory, HttpChatProvider, ImageTransport};
pub use scripted::{ScriptBook, ScriptEntry, ScriptedProvider, ScriptedTranscript};

pub const DEFAULT_MAX_CONTEXT: u64 = 128_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub images: Vec<ImageRef>,
}

/// Ordered chat input. The first message is always the system prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderMessages {
    messages: Vec<Message>,
}

impl ProviderMessages {
    pub fn new(system_prompt: &str) -> Self {
        Self {
            messages: vec![Message {
                role: Role::System,
                text: system_prompt.to_string(),
                images: Vec::new(),
            }],
        }
    }

    pub fn push(&mut self, message: Message) {
        self.messages.push(message);
    }

    pub fn messages(&self) -> &[Message] {
        &self.messages
    }

    /// Hex SHA-256 over the canonical JSON form. Images contribute their ids
    /// and dimensions, not pixel data.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(&self.messages).expect("messages serialize");
        hex::encode(Sha256::digest(bytes))
    }

    /// Ids of the task's input images, in order.
    pub fn input_image_ids(&self) -> Vec<&str> {
        self.messages
            .iter()
            .filter(|m| m.role == Role::User && m.text.starts_with("input image "))
            .flat_map(|m| m.images.iter().map(|i| i.id.as_str()))
            .collect()
    }

    /// Parses `key=value` lines of the most recent observation or protocol
    /// error message. Protocol errors yield no keys.
    pub fn last_observation_fields(&self) -> Vec<(String, String)> {
        let Some(last) = self.messages.iter().rev().find(|m| {
            m.role == Role::User
                && (m.text.starts_with("Observation") || m.text.starts_with("Protocol error"))
        }) else {
            return Vec::new();
        };
        if last.text.starts_with("Protocol error") {
            return Vec::new();
        }
        last.text
            .lines()
            .skip(1)
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    pub temperature: f64,
    pub top_p: f64,
    pub max_output: u32,
}

impl Default for Decoding {
    fn default() -> Self {
        Self {
            temperature: 0.3,
            top_p: 1.0,
            max_output: 4096,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderInfo {
    pub name: String,
    pub max_context_tokens: u64,
}

/// `floor(fraction * max_context)`.
pub fn budget_tokens(fraction: f64, max_context_tokens: u64) -> u64 {
    (fraction * max_context_tokens as f64).floor() as u64
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProviderError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("authentication failed: {0}")]
    AuthFailure(String),
    #[error("http status {status}: {body}")]
    HttpStatus { status: u16, body: String },
    #[error("malformed provider response: {0}")]
    Malformed(String),
    #[error("script exhausted after {consumed} entries")]
    ScriptExhausted { consumed: usize },
    #[error("script mismatch at entry {entry}: expected context {expected}, got {actual}")]
    ScriptMismatch {
        entry: usize,
        expected: String,
        actual: String,
    },
    #[error("provider configuration: {0}")]
    Config(String),
}

impl ProviderError {
    /// Only transport failures are worth retrying.
    pub fn is_retryable(&self) -> bool {
        matches!(self, ProviderError::Transport(_))
    }
}

pub trait ModelProvider: Send {
    fn info(&self) -> ProviderInfo;
    fn complete(
        &mut self,
        messages: &ProviderMessages,
        decoding: &Decoding,
    ) -> Result<String, ProviderError>;
}

/// Creates one provider per session so scripted cursors are never shared.
pub trait ProviderFactory: Send + Sync {
    fn info(&self) -> ProviderInfo;
    fn create(&self, task: &TaskInstance) -> Result<Box<dyn ModelProvider>, ProviderError>;
}
