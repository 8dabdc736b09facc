//! The six-capability taxonomy, the tool catalog and the capability → tool
//! binding checks that back two-stage selection.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

const DEFAULT_ALIASES: &str = include_str!("../data/capability_aliases.json");

/// Name of the remote endpoint that ML-backed tools bind to in the default catalog.
pub const DEFAULT_REMOTE_ENDPOINT: &str = "vision";

/// One of the six reasoning capabilities. The set is closed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Capability {
    Perception,
    Augmentation,
    Spatial,
    Logic,
    Transform,
    Generation,
}

impl Capability {
    pub const ALL: [Capability; 6] = [
        Capability::Perception,
        Capability::Augmentation,
        Capability::Spatial,
        Capability::Logic,
        Capability::Transform,
        Capability::Generation,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Capability::Perception => "Perception",
            Capability::Augmentation => "Augmentation",
            Capability::Spatial => "Spatial",
            Capability::Logic => "Logic",
            Capability::Transform => "Transform",
            Capability::Generation => "Generation",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Capability::Perception => "Fine-grained Visual Perception",
            Capability::Augmentation => "Visual Augmentation & Marking",
            Capability::Spatial => "Spatial & Geometric Understanding",
            Capability::Logic => "Logical Programming Reasoning",
            Capability::Transform => "Visual Transformation & Editing",
            Capability::Generation => "Visual Creation & Generation",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Capability::Perception => {
                "Read structured facts out of an image: text, object positions, counts and local attributes."
            }
            Capability::Augmentation => {
                "Draw cues onto an image (highlights, arrows, boxes) to mark evidence for later steps."
            }
            Capability::Spatial => {
                "Compute with geometry: areas, perimeters, distances and perpendicular constructions."
            }
            Capability::Logic => {
                "Run exact symbolic or algorithmic computation such as arithmetic and path search."
            }
            Capability::Transform => {
                "Change the image itself to isolate what matters, e.g. cropping or segmenting regions."
            }
            Capability::Generation => {
                "Produce new visual artifacts such as simplified diagrams or synthesized sketches."
            }
        }
    }

    pub fn spec(self) -> CapabilitySpec {
        CapabilitySpec {
            id: self,
            display_name: self.display_name().to_string(),
            description: self.description().to_string(),
        }
    }
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Capability {
    type Err = CapabilityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AliasTable::builtin().canonicalize(s)
    }
}

/// Human-facing description of a capability, as rendered into the system prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapabilitySpec {
    pub id: Capability,
    pub display_name: String,
    pub description: String,
}

pub fn default_capability_specs() -> Vec<CapabilitySpec> {
    Capability::ALL.iter().map(|c| c.spec()).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CapabilityError {
    #[error("unknown capability: {0:?}")]
    UnknownCapability(String),
    #[error("alias table: {0}")]
    AliasTable(String),
}

/// Lowercases, spells `&` as `and`, and collapses every non-alphanumeric run
/// into a single space.
pub fn normalize_label(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut pending_space = false;
    for ch in raw.chars() {
        let piece: Option<&str> = if ch == '&' { Some("and") } else { None };
        if let Some(word) = piece {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(word);
            pending_space = true;
            continue;
        }
        if ch.is_alphanumeric() {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.extend(ch.to_lowercase());
        } else {
            pending_space = true;
        }
    }
    out
}

#[derive(Debug, Deserialize)]
struct AliasFile {
    version: u32,
    aliases: BTreeMap<String, String>,
}

/// Versioned mapping from free-form capability labels to capabilities.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AliasTable {
    version: u32,
    aliases: HashMap<String, Capability>,
}

impl AliasTable {
    pub fn builtin() -> Self {
        Self::from_json(DEFAULT_ALIASES).expect("bundled alias table is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, CapabilityError> {
        let file: AliasFile =
            serde_json::from_str(text).map_err(|e| CapabilityError::AliasTable(e.to_string()))?;
        let mut aliases = HashMap::new();
        for (alias, target) in file.aliases {
            let cap = Capability::ALL
                .into_iter()
                .find(|c| c.id() == target)
                .ok_or_else(|| {
                    CapabilityError::AliasTable(format!("alias {alias:?} targets unknown {target:?}"))
                })?;
            aliases.insert(normalize_label(&alias), cap);
        }
        Ok(Self {
            version: file.version,
            aliases,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CapabilityError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CapabilityError::AliasTable(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    /// Exact display name, then normalized display name or id, then alias table.
    pub fn canonicalize(&self, raw: &str) -> Result<Capability, CapabilityError> {
        let trimmed = raw.trim();
        if let Some(c) = Capability::ALL.into_iter().find(|c| c.display_name() == trimmed) {
            return Ok(c);
        }
        let norm = normalize_label(trimmed);
        if norm.is_empty() {
            return Err(CapabilityError::UnknownCapability(raw.to_string()));
        }
        if let Some(c) = Capability::ALL.into_iter().find(|c| {
            normalize_label(c.display_name()) == norm || normalize_label(c.id()) == norm
        }) {
            return Ok(c);
        }
        self.aliases
            .get(&norm)
            .copied()
            .ok_or_else(|| CapabilityError::UnknownCapability(raw.to_string()))
    }
}

impl Default for AliasTable {
    fn default() -> Self {
        Self::builtin()
    }
}

/// Semantic type of a tool parameter; drives argument validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamType {
    String,
    Number,
    Integer,
    Boolean,
    /// `[x, y]` or `{"x": .., "y": ..}`
    Point,
    /// list of points
    Points,
    /// `{"x", "y", "w", "h"}` or `[x, y, w, h]`
    Rect,
    /// rows as a `/`- or newline-separated string, a list of strings, or a list of lists
    Grid,
    Json,
}

impl ParamType {
    pub fn name(self) -> &'static str {
        match self {
            ParamType::String => "string",
            ParamType::Number => "number",
            ParamType::Integer => "integer",
            ParamType::Boolean => "boolean",
            ParamType::Point => "point",
            ParamType::Points => "points",
            ParamType::Rect => "rect",
            ParamType::Grid => "grid",
            ParamType::Json => "json",
        }
    }

    pub fn accepts(self, value: &Value) -> bool {
        match self {
            ParamType::String => value.is_string(),
            ParamType::Number => value.is_number(),
            ParamType::Integer => match value {
                Value::Number(n) => {
                    n.is_i64() || n.is_u64() || n.as_f64().is_some_and(|f| f.fract() == 0.0)
                }
                _ => false,
            },
            ParamType::Boolean => value.is_boolean(),
            ParamType::Point => is_point(value),
            ParamType::Points => value
                .as_array()
                .is_some_and(|items| items.iter().all(is_point)),
            ParamType::Rect => is_rect(value),
            ParamType::Grid => match value {
                Value::String(_) => true,
                Value::Array(rows) => rows.iter().all(|row| match row {
                    Value::String(_) => true,
                    Value::Array(cells) => cells.iter().all(Value::is_string),
                    _ => false,
                }),
                _ => false,
            },
            ParamType::Json => true,
        }
    }
}

fn is_point(value: &Value) -> bool {
    match value {
        Value::Array(xs) => xs.len() == 2 && xs.iter().all(Value::is_number),
        Value::Object(m) => {
            m.get("x").is_some_and(Value::is_number) && m.get("y").is_some_and(Value::is_number)
        }
        _ => false,
    }
}

fn is_rect(value: &Value) -> bool {
    match value {
        Value::Array(xs) => xs.len() == 4 && xs.iter().all(Value::is_number),
        Value::Object(m) => ["x", "y", "w", "h"]
            .iter()
            .all(|k| m.get(*k).is_some_and(Value::is_number)),
        _ => false,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: ParamType,
    #[serde(default)]
    pub required: bool,
    #[serde(default)]
    pub description: String,
}

impl ParamSpec {
    fn new(name: &str, ty: ParamType, required: bool, description: &str) -> Self {
        Self {
            name: name.to_string(),
            ty,
            required,
            description: description.to_string(),
        }
    }
}

/// Whether a tool consumes images passed through the `images` list of a call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageInput {
    #[default]
    None,
    Optional,
    Required,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Backend {
    Local,
    Remote { endpoint: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub name: String,
    pub capability: Capability,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub params: Vec<ParamSpec>,
    #[serde(default)]
    pub images: ImageInput,
    #[serde(default)]
    pub produces_images: bool,
    pub backend: Backend,
}

impl ToolSpec {
    pub fn is_remote(&self) -> bool {
        matches!(self.backend, Backend::Remote { .. })
    }

    /// Compact one-line parameter schema, e.g. `rect: rect (required), color: string`.
    pub fn schema_line(&self) -> String {
        let mut parts: Vec<String> = self
            .params
            .iter()
            .map(|p| {
                let req = if p.required { " (required)" } else { "" };
                format!("{}: {}{}", p.name, p.ty.name(), req)
            })
            .collect();
        match self.images {
            ImageInput::Required => parts.push("images: [image-id] (required)".into()),
            ImageInput::Optional => parts.push("images: [image-id]".into()),
            ImageInput::None => {}
        }
        if parts.is_empty() {
            "(no parameters)".into()
        } else {
            parts.join(", ")
        }
    }
}

/// A concrete tool call decoded from a model turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolInvocation {
    pub tool: String,
    #[serde(default)]
    pub arguments: Map<String, Value>,
    #[serde(default)]
    pub image_refs: Vec<String>,
    /// Absent when capability selection is disabled.
    pub declared_capability: Option<Capability>,
}

/// Typed rejection naming the first violated binding rule.
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BindingError {
    #[error("unknown tool {name:?}")]
    UnknownTool { name: String },
    #[error("no capability declared for tool call")]
    NoCapabilityDeclared,
    #[error("tool belongs to {expected} but capability {declared} was declared")]
    CapabilityMismatch {
        expected: Capability,
        declared: Capability,
    },
    #[error("capability {capability} is disabled in this run")]
    CapabilityDisabled { capability: Capability },
    #[error("missing required argument {name:?}")]
    MissingArgument { name: String },
    #[error("argument {name:?} does not conform to its declared type")]
    ArgumentTypeError { name: String },
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("duplicate tool name {0:?}")]
    DuplicateTool(String),
    #[error("registry file {path}: {detail}")]
    File { path: String, detail: String },
    #[error(transparent)]
    Capability(#[from] CapabilityError),
}

/// Immutable tool catalog. Build once at startup, then share read-only.
#[derive(Debug, Clone)]
pub struct Registry {
    tools: Vec<ToolSpec>,
    index: HashMap<String, usize>,
    aliases: AliasTable,
    unavailable: BTreeMap<String, String>,
}

impl Registry {
    pub fn new(tools: Vec<ToolSpec>, aliases: AliasTable) -> Result<Self, RegistryError> {
        let mut index = HashMap::with_capacity(tools.len());
        for (i, tool) in tools.iter().enumerate() {
            if index.insert(tool.name.clone(), i).is_some() {
                return Err(RegistryError::DuplicateTool(tool.name.clone()));
            }
        }
        Ok(Self {
            tools,
            index,
            aliases,
            unavailable: BTreeMap::new(),
        })
    }

    pub fn empty() -> Self {
        Self::new(Vec::new(), AliasTable::builtin()).expect("empty registry")
    }

    pub fn default_catalog() -> Self {
        Self::new(default_tools(), AliasTable::builtin()).expect("default catalog has unique names")
    }

    /// Parses a registry file (see `docs/config.md` for the schema).
    pub fn from_json(text: &str, origin: &str) -> Result<Self, RegistryError> {
        let file: RegistryFile = serde_json::from_str(text).map_err(|e| RegistryError::File {
            path: origin.to_string(),
            detail: e.to_string(),
        })?;
        let aliases = AliasTable::builtin();
        let mut tools = Vec::with_capacity(file.tools.len());
        for entry in file.tools {
            let capability = aliases.canonicalize(&entry.capability)?;
            tools.push(ToolSpec {
                name: entry.name,
                capability,
                description: entry.description,
                params: entry.params,
                images: entry.images,
                produces_images: entry.produces_images,
                backend: entry.backend,
            });
        }
        Self::new(tools, aliases)
    }

    pub fn load(path: &Path) -> Result<Self, RegistryError> {
        let text = std::fs::read_to_string(path).map_err(|e| RegistryError::File {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn with_aliases(mut self, aliases: AliasTable) -> Self {
        self.aliases = aliases;
        self
    }

    /// Returns a copy without the named tool.
    pub fn without_tool(&self, name: &str) -> Self {
        let tools = self
            .tools
            .iter()
            .filter(|t| t.name != name)
            .cloned()
            .collect();
        let mut out = Self::new(tools, self.aliases.clone()).expect("subset of unique names");
        out.unavailable = self.unavailable.clone();
        out
    }

    pub fn aliases(&self) -> &AliasTable {
        &self.aliases
    }

    pub fn len(&self) -> usize {
        self.tools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&ToolSpec> {
        self.index.get(name).map(|&i| &self.tools[i])
    }

    pub fn canonicalize_capability(&self, raw: &str) -> Result<Capability, CapabilityError> {
        self.aliases.canonicalize(raw)
    }

    /// All tools bound to `capability`, in registration order.
    pub fn tools_for(&self, capability: Capability) -> Vec<&ToolSpec> {
        self.tools
            .iter()
            .filter(|t| t.capability == capability)
            .collect()
    }

    /// Every tool across all capabilities, in registration order.
    pub fn flat_toolset(&self) -> Vec<&ToolSpec> {
        self.tools.iter().collect()
    }

    pub fn remote_tools(&self) -> impl Iterator<Item = &ToolSpec> {
        self.tools.iter().filter(|t| t.is_remote())
    }

    /// Marks a tool as unavailable (e.g. its remote endpoint does not serve it).
    pub fn mark_unavailable(&mut self, name: &str, reason: impl Into<String>) {
        if self.index.contains_key(name) {
            self.unavailable.insert(name.to_string(), reason.into());
        }
    }

    pub fn unavailable_reason(&self, name: &str) -> Option<&str> {
        self.unavailable.get(name).map(String::as_str)
    }

    /// Full two-stage check: tool exists, is bound to the declared capability,
    /// and has all required arguments with conforming types.
    pub fn validate_binding(&self, invocation: &ToolInvocation) -> Result<&ToolSpec, BindingError> {
        let spec = self.lookup(&invocation.tool)?;
        let declared = invocation
            .declared_capability
            .ok_or(BindingError::NoCapabilityDeclared)?;
        if declared != spec.capability {
            return Err(BindingError::CapabilityMismatch {
                expected: spec.capability,
                declared,
            });
        }
        check_arguments(spec, invocation)?;
        Ok(spec)
    }

    /// Flat selection: skips the capability stage but keeps tool and argument checks.
    pub fn validate_arguments(&self, invocation: &ToolInvocation) -> Result<&ToolSpec, BindingError> {
        let spec = self.lookup(&invocation.tool)?;
        check_arguments(spec, invocation)?;
        Ok(spec)
    }

    fn lookup(&self, name: &str) -> Result<&ToolSpec, BindingError> {
        self.get(name).ok_or_else(|| BindingError::UnknownTool {
            name: name.to_string(),
        })
    }
}

fn check_arguments(spec: &ToolSpec, invocation: &ToolInvocation) -> Result<(), BindingError> {
    for param in &spec.params {
        match invocation.arguments.get(&param.name) {
            None | Some(Value::Null) if param.required => {
                return Err(BindingError::MissingArgument {
                    name: param.name.clone(),
                })
            }
            None | Some(Value::Null) => {}
            Some(value) if !param.ty.accepts(value) => {
                return Err(BindingError::ArgumentTypeError {
                    name: param.name.clone(),
                })
            }
            Some(_) => {}
        }
    }
    if spec.images == ImageInput::Required && invocation.image_refs.is_empty() {
        return Err(BindingError::MissingArgument {
            name: "images".into(),
        });
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegistryFile {
    #[allow(dead_code)]
    version: u32,
    tools: Vec<RegistryEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegistryEntry {
    name: String,
    capability: String,
    #[serde(default)]
    description: String,
    #[serde(default)]
    params: Vec<ParamSpec>,
    #[serde(default)]
    images: ImageInput,
    #[serde(default)]
    produces_images: bool,
    backend: Backend,
}

/// Capabilities that appear among `tools`, in canonical order.
pub fn capabilities_of<'a>(tools: impl IntoIterator<Item = &'a ToolSpec>) -> BTreeSet<Capability> {
    tools.into_iter().map(|t| t.capability).collect()
}

fn tool(
    name: &str,
    capability: Capability,
    description: &str,
    params: Vec<ParamSpec>,
    images: ImageInput,
    produces_images: bool,
    remote: bool,
) -> ToolSpec {
    ToolSpec {
        name: name.to_string(),
        capability,
        description: description.to_string(),
        params,
        images,
        produces_images,
        backend: if remote {
            Backend::Remote {
                endpoint: DEFAULT_REMOTE_ENDPOINT.to_string(),
            }
        } else {
            Backend::Local
        },
    }
}

/// The shipped catalog: sixteen tools, two or three per capability.
pub fn default_tools() -> Vec<ToolSpec> {
    use Capability::*;
    use ImageInput as I;
    use ParamType as T;
    let p = ParamSpec::new;
    vec![
        tool(
            "ocr",
            Perception,
            "Extract text from an image, optionally within a rectangle.",
            vec![p("rect", T::Rect, false, "region to read")],
            I::Required,
            false,
            true,
        ),
        tool(
            "grounding_dino",
            Perception,
            "Locate objects matching a text query; returns bounding boxes.",
            vec![p("query", T::String, true, "what to look for")],
            I::Required,
            false,
            true,
        ),
        tool(
            "region_caption",
            Perception,
            "Describe an image or a region: grid layout, object counts and captions.",
            vec![p("rect", T::Rect, false, "region to describe")],
            I::Required,
            false,
            false,
        ),
        tool(
            "highlight",
            Augmentation,
            "Tint a rectangular region to emphasize it.",
            vec![
                p("rect", T::Rect, true, "region to emphasize"),
                p("color", T::String, false, "#rrggbb"),
            ],
            I::Required,
            true,
            false,
        ),
        tool(
            "arrow",
            Augmentation,
            "Draw an arrow between two pixel positions.",
            vec![
                p("from", T::Point, true, "tail [x, y]"),
                p("to", T::Point, true, "head [x, y]"),
                p("color", T::String, false, "#rrggbb"),
                p("stroke", T::Integer, false, "line width in px"),
            ],
            I::Required,
            true,
            false,
        ),
        tool(
            "draw_bbox",
            Augmentation,
            "Outline a rectangle and attach a label to it.",
            vec![
                p("rect", T::Rect, true, "box to draw"),
                p("label", T::String, false, "box label"),
                p("color", T::String, false, "#rrggbb"),
                p("stroke", T::Integer, false, "line width in px"),
            ],
            I::Required,
            true,
            false,
        ),
        tool(
            "geometry_calculator",
            Spatial,
            "Area and perimeter of a polygon, circle or segment.",
            vec![
                p("shape", T::String, true, "polygon | circle | segment"),
                p("points", T::Points, false, "polygon vertices or segment endpoints"),
                p("center", T::Point, false, "circle center"),
                p("radius", T::Number, false, "circle radius"),
            ],
            I::None,
            false,
            false,
        ),
        tool(
            "geom_perp_intersect",
            Spatial,
            "Foot of the perpendicular from a point to a line.",
            vec![
                p("line", T::Points, true, "two distinct points on the line"),
                p("point", T::Point, true, "the point to project"),
            ],
            I::None,
            false,
            false,
        ),
        tool(
            "point_distance",
            Spatial,
            "Euclidean distance between two points.",
            vec![
                p("p", T::Point, true, "first point"),
                p("q", T::Point, true, "second point"),
            ],
            I::None,
            false,
            false,
        ),
        tool(
            "code_agent",
            Logic,
            "Evaluate a mathematical expression (numbers, + - * / ^, sqrt, abs, min, max, sin, cos, pi).",
            vec![p("code", T::String, true, "expression to evaluate")],
            I::None,
            false,
            false,
        ),
        tool(
            "eval_expression",
            Logic,
            "Evaluate an arithmetic expression exactly as written.",
            vec![p("expr", T::String, true, "expression to evaluate")],
            I::None,
            false,
            false,
        ),
        tool(
            "maze_shortest_path",
            Logic,
            "Shortest 4-connected path through a grid maze (. free, # wall, S start, G goal).",
            vec![p("grid", T::Grid, true, "maze rows")],
            I::None,
            false,
            false,
        ),
        tool(
            "crop",
            Transform,
            "Cut a rectangular region out of an image.",
            vec![p("rect", T::Rect, true, "region to keep")],
            I::Required,
            true,
            false,
        ),
        tool(
            "sam",
            Transform,
            "Segment the object at a point (or the whole image).",
            vec![p("point", T::Point, false, "seed point")],
            I::Required,
            true,
            true,
        ),
        tool(
            "generate_image",
            Generation,
            "Synthesize an image from a text prompt.",
            vec![p("prompt", T::String, true, "what to draw")],
            I::None,
            true,
            true,
        ),
        tool(
            "simplify_image",
            Generation,
            "Turn a cluttered grid scene into a clean structured grid and a rendered image.",
            vec![p("scene", T::Json, false, "grid scene description when no image is given")],
            I::Optional,
            true,
            false,
        ),
    ]
}
