//! Local, deterministic tool implementations and the dispatcher that maps a
//! validated [`ToolInvocation`] onto them.
//!
//! Observations are `key=value` lines so that both models and scripted
//! transcripts can pick values out of them.

pub mod expr;
pub mod geometry;
pub mod maze;
pub mod raster;
pub mod scene;

use serde_json::{Map, Value};
use thiserror::Error;

use crate::capability::{Backend, ToolInvocation, ToolSpec};
use crate::images::{ImageRef, ImageStore};
use geometry::{Point, Shape2D};
use raster::{Annotation, AnnotationStyle, Rect};
use scene::SceneSource;

/// Raw result of running a tool, before it becomes an observation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolOutput {
    pub text: String,
    pub images: Vec<ImageRef>,
}

impl ToolOutput {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            images: Vec::new(),
        }
    }

    fn with_image(text: impl Into<String>, image: ImageRef) -> Self {
        let text = format!("{}\nimage={}", text.into(), image.id);
        Self {
            text: text.trim_start().to_string(),
            images: vec![image],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{0}")]
pub struct ToolError(pub String);

impl ToolError {
    pub fn new(detail: impl Into<String>) -> Self {
        Self(detail.into())
    }
}

macro_rules! tool_err {
    ($($arg:tt)*) => { ToolError(format!($($arg)*)) };
}

/// Formats a number with at most six decimals and at least one, e.g. `6.0`, `12.566371`.
pub fn fmt_num(v: f64) -> String {
    if v == 0.0 {
        return "0.0".into();
    }
    let mut s = format!("{v:.6}");
    while s.ends_with('0') {
        s.pop();
    }
    if s.ends_with('.') {
        s.push('0');
    }
    s
}

pub fn point_from_json(v: &Value) -> Option<Point> {
    match v {
        Value::Array(xs) if xs.len() == 2 => Some(Point::new(xs[0].as_f64()?, xs[1].as_f64()?)),
        Value::Object(m) => Some(Point::new(m.get("x")?.as_f64()?, m.get("y")?.as_f64()?)),
        _ => None,
    }
}

pub fn points_from_json(v: &Value) -> Option<Vec<Point>> {
    v.as_array()?.iter().map(point_from_json).collect()
}

fn pixel(v: f64) -> Option<u32> {
    (v.is_finite() && v >= 0.0 && v <= f64::from(u32::MAX)).then(|| v.round() as u32)
}

pub fn rect_from_json(v: &Value) -> Option<Rect> {
    let nums: Vec<f64> = match v {
        Value::Array(xs) if xs.len() == 4 => xs.iter().map(Value::as_f64).collect::<Option<_>>()?,
        Value::Object(m) => ["x", "y", "w", "h"]
            .iter()
            .map(|k| m.get(*k).and_then(Value::as_f64))
            .collect::<Option<_>>()?,
        _ => return None,
    };
    Some(Rect::new(pixel(nums[0])?, pixel(nums[1])?, pixel(nums[2])?, pixel(nums[3])?))
}

fn pixel_point(v: &Value) -> Option<(u32, u32)> {
    let p = point_from_json(v)?;
    Some((pixel(p.x)?, pixel(p.y)?))
}

struct Args<'a> {
    map: &'a Map<String, Value>,
}

impl<'a> Args<'a> {
    fn get(&self, key: &str) -> Option<&'a Value> {
        self.map.get(key).filter(|v| !v.is_null())
    }

    fn req(&self, key: &str) -> Result<&'a Value, ToolError> {
        self.get(key).ok_or_else(|| tool_err!("missing argument {key}"))
    }

    fn str(&self, key: &str) -> Result<&'a str, ToolError> {
        self.req(key)?
            .as_str()
            .ok_or_else(|| tool_err!("argument {key} must be a string"))
    }

    fn point(&self, key: &str) -> Result<Point, ToolError> {
        point_from_json(self.req(key)?).ok_or_else(|| tool_err!("argument {key} must be a point"))
    }

    fn rect(&self, key: &str) -> Result<Rect, ToolError> {
        rect_from_json(self.req(key)?)
            .ok_or_else(|| tool_err!("argument {key} must be a non-negative pixel rect"))
    }

    fn opt_rect(&self, key: &str) -> Result<Option<Rect>, ToolError> {
        self.get(key).map(|_| self.rect(key)).transpose()
    }

    fn style(&self) -> Result<AnnotationStyle, ToolError> {
        let mut style = AnnotationStyle::default();
        if let Some(c) = self.get("color") {
            let text = c.as_str().unwrap_or_default();
            style.color = raster::parse_color(text).ok_or_else(|| tool_err!("bad color {text:?}"))?;
        }
        if let Some(s) = self.get("stroke") {
            let s = s.as_f64().unwrap_or(0.0);
            if !(1.0..=64.0).contains(&s) {
                return Err(tool_err!("stroke must be between 1 and 64"));
            }
            style.stroke = s as u32;
        }
        Ok(style)
    }
}

fn first_image<'a>(inv: &'a ToolInvocation) -> Result<&'a str, ToolError> {
    inv.image_refs
        .first()
        .map(String::as_str)
        .ok_or_else(|| tool_err!("no input image"))
}

fn shape_from_args(args: &Args<'_>) -> Result<Shape2D, ToolError> {
    let points = || {
        args.get("points")
            .and_then(points_from_json)
            .ok_or_else(|| tool_err!("argument points must be a list of points"))
    };
    match args.str("shape")?.trim().to_ascii_lowercase().as_str() {
        "polygon" | "triangle" | "rectangle" | "square" | "quadrilateral" => {
            Ok(Shape2D::Polygon(points()?))
        }
        "circle" => Ok(Shape2D::Circle {
            center: args.point("center")?,
            radius: args
                .req("radius")?
                .as_f64()
                .ok_or_else(|| tool_err!("radius must be a number"))?,
        }),
        "segment" | "line" => match points()?.as_slice() {
            [p, q] => Ok(Shape2D::Segment(*p, *q)),
            other => Err(tool_err!("segment needs exactly 2 points, got {}", other.len())),
        },
        other => Err(tool_err!("unknown shape {other:?}")),
    }
}

/// Runs a Local-backed tool in-process.
pub fn execute_local(
    spec: &ToolSpec,
    invocation: &ToolInvocation,
    store: &ImageStore,
) -> Result<ToolOutput, ToolError> {
    if spec.backend != Backend::Local {
        return Err(tool_err!("tool {} is not local", spec.name));
    }
    for id in &invocation.image_refs {
        if !store.contains(id) {
            return Err(tool_err!("unknown image {id}"));
        }
    }
    let args = Args {
        map: &invocation.arguments,
    };
    let err = |e: &dyn std::fmt::Display| ToolError(e.to_string());

    match spec.name.as_str() {
        "geometry_calculator" => {
            let shape = shape_from_args(&args)?;
            let m = geometry::geometry_calculator(&shape).map_err(|e| err(&e))?;
            Ok(ToolOutput::text(format!(
                "area={}\nperimeter={}",
                fmt_num(m.area),
                fmt_num(m.perimeter)
            )))
        }
        "geom_perp_intersect" => {
            let line = args
                .get("line")
                .and_then(points_from_json)
                .filter(|l| l.len() == 2)
                .ok_or_else(|| tool_err!("line must be two points"))?;
            let p = args.point("point")?;
            let foot = geometry::geom_perp_intersect(line[0], line[1], p).map_err(|e| err(&e))?;
            Ok(ToolOutput::text(format!(
                "foot={},{}\ndistance={}",
                fmt_num(foot.x),
                fmt_num(foot.y),
                fmt_num(geometry::point_distance(foot, p))
            )))
        }
        "point_distance" => {
            let d = geometry::point_distance(args.point("p")?, args.point("q")?);
            Ok(ToolOutput::text(format!("distance={}", fmt_num(d))))
        }
        "eval_expression" | "code_agent" => {
            let key = if spec.name == "code_agent" { "code" } else { "expr" };
            let value = expr::eval_expression(args.str(key)?).map_err(|e| err(&e))?;
            Ok(ToolOutput::text(format!("value={}", fmt_num(value))))
        }
        "maze_shortest_path" => {
            let grid = maze::grid_from_json(args.req("grid")?).map_err(|e| err(&e))?;
            let m = maze::maze_parse(&grid).map_err(|e| err(&e))?;
            let path = maze::maze_shortest_path(&m).map_err(|e| err(&e))?;
            Ok(ToolOutput::text(format!(
                "path={}\nlength={}",
                maze::format_actions(&path),
                path.len()
            )))
        }
        "crop" => {
            let out = raster::crop(store, first_image(invocation)?, args.rect("rect")?)
                .map_err(|e| err(&e))?;
            let text = format!("size={}x{}", out.width, out.height);
            Ok(ToolOutput::with_image(text, out))
        }
        "highlight" | "arrow" | "draw_bbox" => {
            let annotation = match spec.name.as_str() {
                "highlight" => Annotation::Highlight(args.rect("rect")?),
                "arrow" => Annotation::Arrow {
                    from: args.get("from").and_then(pixel_point).ok_or_else(|| tool_err!("from must be a pixel point"))?,
                    to: args.get("to").and_then(pixel_point).ok_or_else(|| tool_err!("to must be a pixel point"))?,
                },
                _ => Annotation::Bbox {
                    rect: args.rect("rect")?,
                    label: args.get("label").and_then(Value::as_str).map(str::to_string),
                },
            };
            let out = raster::annotate(store, first_image(invocation)?, &annotation, args.style()?)
                .map_err(|e| err(&e))?;
            Ok(ToolOutput::with_image("annotated=true", out))
        }
        "region_caption" => {
            let image = store.get(first_image(invocation)?).map_err(|e| err(&e))?;
            let text = scene::region_caption(&image, args.opt_rect("rect")?).map_err(|e| err(&e))?;
            Ok(ToolOutput::text(text))
        }
        "simplify_image" => {
            let grid = match (invocation.image_refs.first(), args.get("scene")) {
                (Some(id), _) => {
                    let image = store.get(id).map_err(|e| err(&e))?;
                    scene::simplify_image(SceneSource::Image(&image))
                }
                (None, Some(v)) => scene::simplify_image(SceneSource::Description(v)),
                (None, None) => Err(scene::SceneError::NoStructuredGrid),
            }
            .map_err(|e| err(&e))?;
            let clean = scene::store_grid_image(store, &grid).map_err(|e| err(&e))?;
            let rows = maze::grid_rows(&grid);
            let text = format!("rows={}\ncols={}\ngrid={}", rows.len(), grid[0].len(), rows.join("/"));
            Ok(ToolOutput::with_image(text, clean))
        }
        other => Err(tool_err!("no local implementation for tool {other}")),
    }
}
