//! Application config: TOML with `${VAR}` interpolation and a resolved
//! provider routing table.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::capability::{AliasTable, Capability, Registry};
use crate::images::ImageStore;
use crate::orchestrator::RunConfig;
use crate::provider::{HttpChatConfig, HttpChatFactory, ImageTransport, ScriptBook};
use crate::provider::{ProviderFactory, DEFAULT_MAX_CONTEXT};
use crate::remote::EndpointConfig;
use crate::starter::StarterSet;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigLoadError {
    #[error("config parse error at {location}: {detail}")]
    ConfigParseError { location: String, detail: String },
    #[error("environment variable {0} is not set")]
    MissingEnvVar(String),
    #[error("conflicting {level} overrides for {key}: {detail}")]
    PrecedenceConflict {
        level: RouteLevel,
        key: String,
        detail: String,
    },
}

fn parse_error(location: impl Into<String>, detail: impl Into<String>) -> ConfigLoadError {
    ConfigLoadError::ConfigParseError {
        location: location.into(),
        detail: detail.into(),
    }
}

/// Credential resolved from the environment. Serializes back to its
/// `${VAR}` reference, never to the value.
#[derive(Clone, PartialEq, Eq)]
pub struct Secret {
    var: String,
    value: String,
}

impl Secret {
    pub fn var(&self) -> &str {
        &self.var
    }

    pub fn expose(&self) -> &str {
        &self.value
    }
}

impl fmt::Debug for Secret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Secret(${{{}}})", self.var)
    }
}

impl Serialize for Secret {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("${{{}}}", self.var))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProviderBlock {
    /// Replays per-task transcripts; without `scripts` the built-in starter
    /// transcripts are used.
    Scripted {
        #[serde(skip_serializing_if = "Option::is_none")]
        scripts: Option<PathBuf>,
        max_context_tokens: u64,
    },
    Http {
        base_url: String,
        model: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        api_key: Option<Secret>,
        max_context_tokens: u64,
        timeout_ms: u64,
        image_transport: ImageTransport,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteLevel {
    Global,
    Capability,
    Tool,
}

impl fmt::Display for RouteLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RouteLevel::Global => "global",
            RouteLevel::Capability => "capability",
            RouteLevel::Tool => "tool",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Route {
    pub provider: String,
    pub level: RouteLevel,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Routing {
    pub global: String,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub capability: BTreeMap<Capability, String>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub tool: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AppConfig {
    pub log_level: String,
    pub runs_root: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub registry: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aliases: Option<PathBuf>,
    pub run: RunConfig,
    pub providers: BTreeMap<String, ProviderBlock>,
    pub routing: Routing,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub endpoints: Vec<EndpointConfig>,
    /// Provider per registry tool after applying tool > capability > global.
    #[serde(skip)]
    pub routes: BTreeMap<String, Route>,
}

// ---------------------------------------------------------------------------
// raw file schema

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default = "default_log_level")]
    log_level: String,
    #[serde(default = "default_runs_root")]
    runs_root: String,
    registry: Option<String>,
    aliases: Option<String>,
    #[serde(default)]
    run: RunConfig,
    #[serde(default)]
    providers: BTreeMap<String, RawProvider>,
    #[serde(default)]
    routing: RawRouting,
    #[serde(default)]
    endpoints: Vec<EndpointConfig>,
}

fn default_log_level() -> String {
    "info".into()
}

fn default_runs_root() -> String {
    "runs".into()
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum RawProvider {
    Scripted {
        scripts: Option<String>,
        max_context_tokens: Option<u64>,
    },
    Http {
        base_url: String,
        model: String,
        api_key: Option<String>,
        max_context_tokens: Option<u64>,
        timeout_ms: Option<u64>,
        image_transport: Option<ImageTransport>,
    },
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRouting {
    global: Option<String>,
    #[serde(default)]
    capability: BTreeMap<String, String>,
    #[serde(default)]
    tool: BTreeMap<String, String>,
}

const LOG_LEVELS: [&str; 5] = ["trace", "debug", "info", "warn", "error"];

/// Replaces every `${NAME}` in `text` using `env`.
pub fn interpolate(
    text: &str,
    location: &str,
    env: &dyn Fn(&str) -> Option<String>,
) -> Result<String, ConfigLoadError> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after
            .find('}')
            .ok_or_else(|| parse_error(location, "unterminated ${ reference"))?;
        let name = &after[..end];
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(parse_error(location, format!("invalid variable name {name:?}")));
        }
        out.push_str(&env(name).ok_or_else(|| ConfigLoadError::MissingEnvVar(name.to_string()))?);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, col)
}

struct Resolver<'a> {
    base: &'a Path,
    env: &'a dyn Fn(&str) -> Option<String>,
}

impl Resolver<'_> {
    fn string(&self, value: &str, location: &str) -> Result<String, ConfigLoadError> {
        interpolate(value, location, self.env)
    }

    fn existing_path(&self, value: &str, location: &str) -> Result<PathBuf, ConfigLoadError> {
        let path = self.path(value, location)?;
        if !path.exists() {
            return Err(parse_error(location, format!("{} does not exist", path.display())));
        }
        Ok(path)
    }

    fn path(&self, value: &str, location: &str) -> Result<PathBuf, ConfigLoadError> {
        let p = PathBuf::from(self.string(value, location)?);
        Ok(if p.is_absolute() { p } else { self.base.join(p) })
    }

    fn secret(&self, value: &str, location: &str) -> Result<Secret, ConfigLoadError> {
        let var = value
            .strip_prefix("${")
            .and_then(|v| v.strip_suffix('}'))
            .filter(|v| !v.contains(['$', '{', '}']))
            .ok_or_else(|| {
                parse_error(location, "credentials must be an environment reference like ${NAME}")
            })?;
        let value = self.string(value, location)?;
        Ok(Secret {
            var: var.to_string(),
            value,
        })
    }

    fn provider(&self, name: &str, raw: RawProvider) -> Result<ProviderBlock, ConfigLoadError> {
        let loc = |field: &str| format!("providers.{name}.{field}");
        Ok(match raw {
            RawProvider::Scripted {
                scripts,
                max_context_tokens,
            } => ProviderBlock::Scripted {
                scripts: scripts
                    .map(|s| self.existing_path(&s, &loc("scripts")))
                    .transpose()?,
                max_context_tokens: max_context_tokens.unwrap_or(DEFAULT_MAX_CONTEXT),
            },
            RawProvider::Http {
                base_url,
                model,
                api_key,
                max_context_tokens,
                timeout_ms,
                image_transport,
            } => ProviderBlock::Http {
                base_url: self.string(&base_url, &loc("base_url"))?,
                model: self.string(&model, &loc("model"))?,
                api_key: api_key
                    .map(|k| self.secret(&k, &loc("api_key")))
                    .transpose()?,
                max_context_tokens: max_context_tokens.unwrap_or(DEFAULT_MAX_CONTEXT),
                timeout_ms: timeout_ms.unwrap_or(120_000),
                image_transport: image_transport.unwrap_or_default(),
            },
        })
    }
}

impl AppConfig {
    /// Parses config text. Relative paths resolve against `base`.
    pub fn from_toml_str(
        text: &str,
        origin: &str,
        base: &Path,
        env: &dyn Fn(&str) -> Option<String>,
    ) -> Result<Self, ConfigLoadError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| {
            let location = match e.span() {
                Some(span) => {
                    let (line, col) = line_col(text, span.start);
                    format!("{origin}:{line}:{col}")
                }
                None => origin.to_string(),
            };
            parse_error(location, e.message().to_string())
        })?;
        let r = Resolver { base, env };

        let log_level = r.string(&raw.log_level, "log_level")?.to_ascii_lowercase();
        if !LOG_LEVELS.contains(&log_level.as_str()) {
            return Err(parse_error("log_level", format!("unknown level {log_level:?}")));
        }
        raw.run
            .validate()
            .map_err(|e| parse_error("run", e.to_string()))?;

        let mut providers = BTreeMap::new();
        for (name, block) in raw.providers {
            let block = r.provider(&name, block)?;
            providers.insert(name, block);
        }
        let mut endpoints = Vec::new();
        for (i, mut ep) in raw.endpoints.into_iter().enumerate() {
            ep.base_url = r
                .string(&ep.base_url, &format!("endpoints[{i}].base_url"))?
                .trim_end_matches('/')
                .to_string();
            if ep.timeout_ms == 0 || ep.max_payload_bytes == 0 {
                return Err(parse_error(format!("endpoints[{i}]"), "limits must be positive"));
            }
            if endpoints.iter().any(|e: &EndpointConfig| e.name == ep.name) {
                return Err(parse_error(format!("endpoints[{i}].name"), "duplicate endpoint"));
            }
            endpoints.push(ep);
        }

        let mut config = AppConfig {
            log_level,
            runs_root: r.path(&raw.runs_root, "runs_root")?,
            registry: raw
                .registry
                .map(|p| r.existing_path(&p, "registry"))
                .transpose()?,
            aliases: raw
                .aliases
                .map(|p| r.existing_path(&p, "aliases"))
                .transpose()?,
            run: raw.run,
            providers,
            routing: Routing::default(),
            endpoints,
            routes: BTreeMap::new(),
        };
        let registry = config.registry()?;
        config.routing = resolve_routing(raw.routing, &config.providers, &registry)?;
        config.routes = build_routes(&config.routing, &registry);
        Ok(config)
    }

    /// The canonical serialization, also written as a run's config snapshot.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to toml")
    }

    pub fn registry(&self) -> Result<Registry, ConfigLoadError> {
        let mut registry = match &self.registry {
            Some(path) => Registry::load(path).map_err(|e| parse_error("registry", e.to_string()))?,
            None => Registry::default_catalog(),
        };
        if let Some(path) = &self.aliases {
            let aliases = AliasTable::load(path).map_err(|e| parse_error("aliases", e.to_string()))?;
            registry = registry.with_aliases(aliases);
        }
        Ok(registry)
    }

    /// Factory for the reasoning model: the global route.
    pub fn planner(&self, images: Arc<ImageStore>) -> Result<Box<dyn ProviderFactory>, ConfigLoadError> {
        self.provider_factory(&self.routing.global, images)
    }

    pub fn provider_factory(
        &self,
        name: &str,
        images: Arc<ImageStore>,
    ) -> Result<Box<dyn ProviderFactory>, ConfigLoadError> {
        let block = self
            .providers
            .get(name)
            .ok_or_else(|| parse_error("routing", format!("unknown provider {name:?}")))?;
        Ok(match block {
            ProviderBlock::Scripted {
                scripts,
                max_context_tokens,
            } => {
                let mut book = match scripts {
                    Some(path) => ScriptBook::load(path)
                        .map_err(|e| parse_error(format!("providers.{name}.scripts"), e.to_string()))?,
                    None => StarterSet::generate().scripts,
                };
                book.max_context_tokens = *max_context_tokens;
                Box::new(book)
            }
            ProviderBlock::Http {
                base_url,
                model,
                api_key,
                max_context_tokens,
                timeout_ms,
                image_transport,
            } => {
                let mut cfg = HttpChatConfig::new(base_url, model);
                cfg.name = name.to_string();
                cfg.api_key = api_key.as_ref().map(|s| s.expose().to_string());
                cfg.max_context_tokens = *max_context_tokens;
                cfg.timeout_ms = *timeout_ms;
                cfg.image_transport = image_transport.clone();
                Box::new(HttpChatFactory { config: cfg, images })
            }
        })
    }

    /// Every secret value, for scrubbing output.
    pub fn secrets(&self) -> Vec<&str> {
        self.providers
            .values()
            .filter_map(|p| match p {
                ProviderBlock::Http {
                    api_key: Some(s), ..
                } => Some(s.expose()),
                _ => None,
            })
            .collect()
    }
}

fn resolve_routing(
    raw: RawRouting,
    providers: &BTreeMap<String, ProviderBlock>,
    registry: &Registry,
) -> Result<Routing, ConfigLoadError> {
    let known = |name: &str, location: String| {
        if providers.contains_key(name) {
            Ok(name.to_string())
        } else {
            Err(parse_error(location, format!("unknown provider {name:?}")))
        }
    };
    let global = match raw.global {
        Some(g) => known(&g, "routing.global".into())?,
        None if providers.len() == 1 => providers.keys().next().cloned().expect("one provider"),
        None if providers.is_empty() => {
            return Err(parse_error("providers", "at least one provider block is required"))
        }
        None => {
            return Err(parse_error(
                "routing.global",
                "required when more than one provider is declared",
            ))
        }
    };

    let mut capability: BTreeMap<Capability, (String, String)> = BTreeMap::new();
    for (label, provider) in raw.capability {
        let location = format!("routing.capability.{label}");
        let cap = registry
            .canonicalize_capability(&label)
            .map_err(|e| parse_error(&location, e.to_string()))?;
        let provider = known(&provider, location)?;
        if let Some((other_label, other)) = capability.get(&cap) {
            if *other != provider {
                return Err(ConfigLoadError::PrecedenceConflict {
                    level: RouteLevel::Capability,
                    key: cap.id().to_string(),
                    detail: format!("{other_label:?} -> {other}, {label:?} -> {provider}"),
                });
            }
        }
        capability.insert(cap, (label, provider));
    }

    let mut tool = BTreeMap::new();
    for (name, provider) in raw.tool {
        let location = format!("routing.tool.{name}");
        if registry.get(&name).is_none() {
            return Err(parse_error(&location, "tool is not in the registry"));
        }
        tool.insert(name, known(&provider, location)?);
    }
    Ok(Routing {
        global,
        capability: capability.into_iter().map(|(c, (_, p))| (c, p)).collect(),
        tool,
    })
}

fn build_routes(routing: &Routing, registry: &Registry) -> BTreeMap<String, Route> {
    let mut routes = BTreeMap::new();
    for spec in registry.flat_toolset() {
        let by_cap = routing.capability.get(&spec.capability);
        let route = match (routing.tool.get(&spec.name), by_cap) {
            (Some(t), Some(c)) => {
                if t != c {
                    tracing::info!(
                        tool = %spec.name,
                        tool_level = %t,
                        capability_level = %c,
                        "tool-level provider override wins over capability-level"
                    );
                }
                Route { provider: t.clone(), level: RouteLevel::Tool }
            }
            (Some(t), None) => Route { provider: t.clone(), level: RouteLevel::Tool },
            (None, Some(c)) => Route { provider: c.clone(), level: RouteLevel::Capability },
            (None, None) => Route {
                provider: routing.global.clone(),
                level: RouteLevel::Global,
            },
        };
        routes.insert(spec.name.clone(), route);
    }
    routes
}

/// Reads `path`, resolving `${VAR}` from the process environment.
pub fn load_config(path: &Path) -> Result<AppConfig, ConfigLoadError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| parse_error(path.display().to_string(), e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let base = if base.as_os_str().is_empty() { Path::new(".") } else { base };
    let base = base.canonicalize().unwrap_or_else(|_| base.to_path_buf());
    AppConfig::from_toml_str(&text, &path.display().to_string(), &base, &|k| std::env::var(k).ok())
}
