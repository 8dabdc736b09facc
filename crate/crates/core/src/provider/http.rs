use std::sync::Arc;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    Decoding, ModelProvider, ProviderError, ProviderFactory, ProviderInfo, ProviderMessages, Role,
    DEFAULT_MAX_CONTEXT,
};
use crate::images::ImageStore;
use crate::task::TaskInstance;

/// How image references are turned into request content.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ImageTransport {
    /// `data:` URLs carrying base64 bytes.
    Inline,
    /// `{prefix}{id}.{format}`, for images uploaded ahead of time.
    UrlPrefix { prefix: String },
}

impl Default for ImageTransport {
    fn default() -> Self {
        ImageTransport::Inline
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpChatConfig {
    pub name: String,
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub max_context_tokens: u64,
    pub timeout_ms: u64,
    pub image_transport: ImageTransport,
}

impl HttpChatConfig {
    pub fn new(base_url: &str, model: &str) -> Self {
        Self {
            name: model.to_string(),
            base_url: base_url.trim_end_matches('/').to_string(),
            model: model.to_string(),
            api_key: None,
            max_context_tokens: DEFAULT_MAX_CONTEXT,
            timeout_ms: 120_000,
            image_transport: ImageTransport::Inline,
        }
    }
}

/// Replaces every occurrence of `secret` so it cannot leak into logs.
pub(crate) fn redact(text: &str, secret: Option<&str>) -> String {
    match secret {
        Some(s) if !s.is_empty() => text.replace(s, "[REDACTED]"),
        _ => text.to_string(),
    }
}

fn excerpt(text: &str) -> String {
    text.chars().take(200).collect()
}

/// OpenAI-style `chat/completions` adapter.
pub struct HttpChatProvider {
    config: HttpChatConfig,
    images: Arc<ImageStore>,
    client: reqwest::blocking::Client,
}

impl HttpChatProvider {
    pub fn new(config: HttpChatConfig, images: Arc<ImageStore>) -> Result<Self, ProviderError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| ProviderError::Config(e.to_string()))?;
        Ok(Self {
            config,
            images,
            client,
        })
    }

    fn image_url(&self, id: &str) -> Result<String, ProviderError> {
        let stored = self
            .images
            .get(id)
            .map_err(|e| ProviderError::Config(e.to_string()))?;
        Ok(match &self.config.image_transport {
            ImageTransport::Inline => format!(
                "data:image/{};base64,{}",
                stored.format,
                base64::engine::general_purpose::STANDARD.encode(&stored.bytes)
            ),
            ImageTransport::UrlPrefix { prefix } => format!("{prefix}{id}.{}", stored.format),
        })
    }

    pub(crate) fn request_body(
        &self,
        messages: &ProviderMessages,
        decoding: &Decoding,
    ) -> Result<Value, ProviderError> {
        let mut out = Vec::new();
        for m in messages.messages() {
            let role = match m.role {
                Role::System => "system",
                Role::User => "user",
                Role::Assistant => "assistant",
            };
            if m.images.is_empty() {
                out.push(json!({"role": role, "content": m.text}));
                continue;
            }
            let mut parts = vec![json!({"type": "text", "text": m.text})];
            for img in &m.images {
                parts.push(json!({"type": "image_url", "image_url": {"url": self.image_url(&img.id)?}}));
            }
            out.push(json!({"role": role, "content": parts}));
        }
        Ok(json!({
            "model": self.config.model,
            "messages": out,
            "temperature": decoding.temperature,
            "top_p": decoding.top_p,
            "max_tokens": decoding.max_output,
        }))
    }
}

impl ModelProvider for HttpChatProvider {
    fn info(&self) -> ProviderInfo {
        ProviderInfo {
            name: self.config.name.clone(),
            max_context_tokens: self.config.max_context_tokens,
        }
    }

    fn complete(
        &mut self,
        messages: &ProviderMessages,
        decoding: &Decoding,
    ) -> Result<String, ProviderError> {
        let body = self.request_body(messages, decoding)?;
        let secret = self.config.api_key.as_deref();
        tracing::debug!(
            provider = %self.config.name,
            messages = messages.messages().len(),
            context = %messages.digest(),
            "chat request"
        );
        let url = format!("{}/chat/completions", self.config.base_url);
        let mut req = self.client.post(&url).json(&body);
        if let Some(key) = secret {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| ProviderError::Transport(redact(&e.to_string(), secret)))?;
        let status = resp.status().as_u16();
        let text = resp
            .text()
            .map_err(|e| ProviderError::Transport(redact(&e.to_string(), secret)))?;
        tracing::debug!(status, body = %redact(&excerpt(&text), secret), "chat response");
        match status {
            200..=299 => {}
            401 | 403 => return Err(ProviderError::AuthFailure(format!("status {status}"))),
            429 | 500..=599 => {
                return Err(ProviderError::Transport(format!(
                    "status {status}: {}",
                    redact(&excerpt(&text), secret)
                )))
            }
            _ => {
                return Err(ProviderError::HttpStatus {
                    status,
                    body: redact(&excerpt(&text), secret),
                })
            }
        }
        let parsed: Value =
            serde_json::from_str(&text).map_err(|e| ProviderError::Malformed(e.to_string()))?;
        parsed
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(|content| redact(content, secret))
            .ok_or_else(|| ProviderError::Malformed("missing choices[0].message.content".into()))
    }
}

/// Builds one HTTP adapter per session from a shared config.
pub struct HttpChatFactory {
    pub config: HttpChatConfig,
    pub images: Arc<ImageStore>,
}

impl ProviderFactory for HttpChatFactory {
    fn info(&self) -> ProviderInfo {
        ProviderInfo {
            name: self.config.name.clone(),
            max_context_tokens: self.config.max_context_tokens,
        }
    }

    fn create(&self, _task: &TaskInstance) -> Result<Box<dyn ModelProvider>, ProviderError> {
        Ok(Box::new(HttpChatProvider::new(
            self.config.clone(),
            self.images.clone(),
        )?))
    }
}
