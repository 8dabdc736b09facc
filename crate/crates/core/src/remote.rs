//! Client for tool-protocol v1: JSON over HTTP with base64 image payloads.
//!
//! `POST {base}/tools/{name}` with `{"arguments", "images": [{"id", "data", "metadata"}]}`
//! answers `{"text", "images": [{"data", "metadata"}]}`; `GET {base}/tools`
//! answers `{"tools": [{"name", "params"}]}`.

use std::collections::BTreeMap;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::capability::{Backend, Registry};
use crate::images::{ImageMetadata, ImageRef, ImageStore};
use crate::toolkit::ToolOutput;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub name: String,
    pub base_url: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_payload")]
    pub max_payload_bytes: u64,
    /// Name of the environment variable holding a bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_env: Option<String>,
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_max_payload() -> u64 {
    16 * 1024 * 1024
}

impl EndpointConfig {
    pub fn new(name: &str, base_url: &str) -> Self {
        Self {
            name: name.to_string(),
            base_url: base_url.trim_end_matches('/').to_string(),
            timeout_ms: default_timeout_ms(),
            max_payload_bytes: default_max_payload(),
            auth_env: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RemoteError {
    #[error("endpoint timed out")]
    Timeout,
    #[error("endpoint unreachable")]
    Unreachable(String),
    #[error("http status {code}: {body}")]
    HttpStatus { code: u16, body: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("payload of {size} bytes exceeds limit {limit}")]
    PayloadTooLarge { size: u64, limit: u64 },
    #[error("image error: {0}")]
    Image(String),
    #[error("endpoint configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoteToolInfo {
    pub name: String,
    #[serde(default)]
    pub params: Value,
}

#[derive(Deserialize)]
struct WireImage {
    data: String,
    #[serde(default)]
    metadata: Option<BTreeMap<String, String>>,
}

#[derive(Deserialize)]
struct WireResponse {
    text: String,
    #[serde(default)]
    images: Vec<WireImage>,
}

#[derive(Deserialize)]
struct WireCatalog {
    tools: Vec<RemoteToolInfo>,
}

fn client(endpoint: &EndpointConfig) -> Result<reqwest::blocking::Client, RemoteError> {
    if endpoint.timeout_ms == 0 {
        return Err(RemoteError::Config("timeout_ms must be at least 1".into()));
    }
    reqwest::blocking::Client::builder()
        .timeout(Duration::from_millis(endpoint.timeout_ms))
        .build()
        .map_err(|e| RemoteError::Config(e.to_string()))
}

fn map_send_error(e: reqwest::Error) -> RemoteError {
    if e.is_timeout() {
        RemoteError::Timeout
    } else {
        RemoteError::Unreachable(e.to_string())
    }
}

fn authorize(
    endpoint: &EndpointConfig,
    req: reqwest::blocking::RequestBuilder,
) -> reqwest::blocking::RequestBuilder {
    match endpoint.auth_env.as_deref().and_then(|v| std::env::var(v).ok()) {
        Some(token) => req.bearer_auth(token),
        None => req,
    }
}

fn read_body(resp: reqwest::blocking::Response) -> Result<String, RemoteError> {
    let code = resp.status().as_u16();
    let text = resp.text().map_err(map_send_error)?;
    if !(200..300).contains(&code) {
        return Err(RemoteError::HttpStatus {
            code,
            body: text.chars().take(200).collect(),
        });
    }
    Ok(text)
}

/// Builds the request body; fails client-side when it exceeds the endpoint limit.
pub fn encode_request(
    endpoint: &EndpointConfig,
    arguments: &Map<String, Value>,
    images: &[ImageRef],
    store: &ImageStore,
) -> Result<Vec<u8>, RemoteError> {
    let mut wire_images = Vec::with_capacity(images.len());
    for r in images {
        let stored = store.get(&r.id).map_err(|e| RemoteError::Image(e.to_string()))?;
        let mut img = json!({"id": r.id, "data": B64.encode(&stored.bytes)});
        if !stored.metadata.is_empty() {
            img["metadata"] = json!(stored.metadata);
        }
        wire_images.push(img);
    }
    let body = serde_json::to_vec(&json!({"arguments": arguments, "images": wire_images}))
        .expect("json value serializes");
    let size = body.len() as u64;
    if size > endpoint.max_payload_bytes {
        return Err(RemoteError::PayloadTooLarge {
            size,
            limit: endpoint.max_payload_bytes,
        });
    }
    Ok(body)
}

/// Parses a v1 response body, registering produced images in the store.
pub fn decode_response(text: &str, store: &ImageStore) -> Result<ToolOutput, RemoteError> {
    let resp: WireResponse =
        serde_json::from_str(text).map_err(|e| RemoteError::MalformedResponse(e.to_string()))?;
    let mut out = ToolOutput::text(resp.text);
    for img in resp.images {
        let bytes = B64
            .decode(img.data.as_bytes())
            .map_err(|e| RemoteError::MalformedResponse(format!("image data: {e}")))?;
        let metadata: ImageMetadata = img.metadata.unwrap_or_default();
        let r = store
            .insert_encoded(bytes, metadata)
            .map_err(|e| RemoteError::MalformedResponse(e.to_string()))?;
        out.text.push_str(&format!("\nimage={}", r.id));
        out.images.push(r);
    }
    Ok(out)
}

pub fn call_remote_tool(
    endpoint: &EndpointConfig,
    tool: &str,
    arguments: &Map<String, Value>,
    images: &[ImageRef],
    store: &ImageStore,
) -> Result<ToolOutput, RemoteError> {
    let body = encode_request(endpoint, arguments, images, store)?;
    let url = format!("{}/tools/{}", endpoint.base_url, tool);
    let req = client(endpoint)?
        .post(url)
        .header(reqwest::header::CONTENT_TYPE, "application/json")
        .body(body);
    let resp = authorize(endpoint, req).send().map_err(map_send_error)?;
    decode_response(&read_body(resp)?, store)
}

pub fn list_remote_tools(endpoint: &EndpointConfig) -> Result<Vec<RemoteToolInfo>, RemoteError> {
    let req = client(endpoint)?.get(format!("{}/tools", endpoint.base_url));
    let resp = authorize(endpoint, req).send().map_err(map_send_error)?;
    let text = read_body(resp)?;
    let catalog: WireCatalog =
        serde_json::from_str(&text).map_err(|e| RemoteError::MalformedResponse(e.to_string()))?;
    Ok(catalog.tools)
}

/// Checks every Remote-backed tool against its endpoint's catalog and marks
/// missing or unreachable ones unavailable. Returns one warning per tool.
pub fn verify_remote_tools(registry: &mut Registry, endpoints: &[EndpointConfig]) -> Vec<String> {
    let mut by_endpoint: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for spec in registry.remote_tools() {
        if let Backend::Remote { endpoint } = &spec.backend {
            by_endpoint
                .entry(endpoint.clone())
                .or_default()
                .push(spec.name.clone());
        }
    }
    let mut warnings = Vec::new();
    for (endpoint_name, tools) in by_endpoint {
        let catalog = match endpoints.iter().find(|e| e.name == endpoint_name) {
            None => Err(format!("endpoint {endpoint_name} not configured")),
            Some(ep) => list_remote_tools(ep).map_err(|e| format!("endpoint {endpoint_name}: {e}")),
        };
        for tool in tools {
            let reason = match &catalog {
                Err(e) => Some(e.clone()),
                Ok(list) if !list.iter().any(|t| t.name == tool) => {
                    Some(format!("not served by endpoint {endpoint_name}"))
                }
                Ok(_) => None,
            };
            if let Some(reason) = reason {
                tracing::warn!(tool = %tool, %reason, "remote tool unavailable");
                warnings.push(format!("{tool}: {reason}"));
                registry.mark_unavailable(&tool, reason);
            }
        }
    }
    warnings
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn payload_limit_is_enforced_before_sending() {
        let mut ep = EndpointConfig::new("v", "http://127.0.0.1:9");
        ep.max_payload_bytes = 10;
        let mut args = Map::new();
        args.insert("msg".into(), json!("this is longer than ten bytes"));
        let err = call_remote_tool(&ep, "echo", &args, &[], &ImageStore::new()).unwrap_err();
        assert!(matches!(err, RemoteError::PayloadTooLarge { limit: 10, .. }));
    }

    #[test]
    fn response_decoding() {
        let store = ImageStore::new();
        assert_eq!(decode_response(r#"{"text":"hi"}"#, &store).unwrap().text, "hi");
        assert!(matches!(
            decode_response(r#"{"images":[]}"#, &store),
            Err(RemoteError::MalformedResponse(_))
        ));
        assert!(matches!(
            decode_response(r#"{"text":"x","images":[{"data":"!!"}]}"#, &store),
            Err(RemoteError::MalformedResponse(_))
        ));
    }

    #[test]
    fn unreachable_message() {
        assert_eq!(RemoteError::Unreachable("x".into()).to_string(), "endpoint unreachable");
    }
}
