//! The shipped starter task set and its scripted transcripts, generated
//! deterministically from a fixed seed.
//!
//! Scripts are templated: each step reads the values it needs (image ids,
//! grids, paths, counts) from the previous observation, so a task only
//! succeeds when every tool in its chain actually ran.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use image::{Rgba, RgbaImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::capability::Capability;
use crate::evaluation::{
    parse_tasks_with, AnswerModeSpec, ImageFile, ImageSpec, SceneImage, TaskLine, TaskLoadError,
};
use crate::images::{ImageMetadata, ImageStore};
use crate::provider::{ScriptBook, ScriptEntry, ScriptedTranscript};
use crate::task::{AnswerMode, TaskInstance};
use crate::toolkit::expr::eval_expression;
use crate::toolkit::fmt_num;
use crate::toolkit::geometry::{self, Point};
use crate::toolkit::maze::{format_actions, grid_from_rows, maze_parse, maze_shortest_path};
use crate::toolkit::raster::{write_objects, Rect, SceneObject};
use crate::toolkit::scene::META_CAPTION;

pub const STARTER_SEED: u64 = 20_251_018;

/// A 7×7 maze whose unique shortest route from S to G is `L,U,U,L,L,L,D`
/// under (row, col) coordinates. Reconstructed to match the action sequence;
/// not an original layout.
pub const FIG6_MAZE: [&str; 7] = [
    "#######", "#.....#", "#.....#", "#G##.##", "##...S#", "#.....#", "#######",
];
pub const FIG6_ANSWER: &str = "L,U,U,L,L,L,D";

/// Twelve tasks for ablation checks: half of them need a Logic tool.
pub const ABLATION_TASK_IDS: [&str; 12] = [
    "maze-01", "maze-02", "maze-03", "expr-01", "expr-02", "expr-03", "geo-01", "geo-02",
    "geo-03", "count-01", "count-02", "count-03",
];

/// Tasks, image files and transcripts, ready to load or write out.
#[derive(Debug, Clone, PartialEq)]
pub struct StarterSet {
    pub lines: Vec<TaskLine>,
    /// Relative path → PNG bytes.
    pub files: BTreeMap<String, Vec<u8>>,
    pub scripts: ScriptBook,
}

fn cap_call(cap: Capability, tool: &str, arguments: Value, images: &[&str]) -> String {
    let payload = if images.is_empty() {
        json!({"name": tool, "arguments": arguments})
    } else {
        json!({"name": tool, "arguments": arguments, "images": images})
    };
    format!(
        "<cap>{}</cap><tool_call>{}</tool_call>",
        cap.display_name(),
        payload
    )
}

fn step(think: &str, body: String) -> ScriptEntry {
    ScriptEntry::templated(format!("<think>{think}</think>{body}"))
}

fn answer(think: &str, value: &str) -> ScriptEntry {
    ScriptEntry::templated(format!("<think>{think}</think><answer>{value}</answer>"))
}

fn labels(caps: &[Capability]) -> Vec<String> {
    caps.iter().map(|c| c.id().to_string()).collect()
}

fn maze_script() -> ScriptedTranscript {
    ScriptedTranscript {
        entries: vec![
            step(
                "The picture is noisy. Abstract it into a clean grid first.",
                cap_call(Capability::Generation, "simplify_image", json!({}), &["{{input:0}}"]),
            ),
            step(
                "Read the grid layout, start and goal from the clean rendering.",
                cap_call(Capability::Perception, "region_caption", json!({}), &["{{obs:image}}"]),
            ),
            step(
                "Search for the shortest collision-free route.",
                cap_call(
                    Capability::Logic,
                    "maze_shortest_path",
                    json!({"grid": "{{obs:grid}}"}),
                    &[],
                ),
            ),
            answer("The solver returned the optimal move sequence.", "{{obs:path}}"),
        ],
    }
}

const MAZE_INSTRUCTION: &str = "The image shows a grid maze: dark cells are walls, S is the start and G is the goal. \
Moves are U, D, L, R (one cell each). Give the shortest move sequence from S to G as comma-separated letters.";

fn maze_task(id: &str, rows: &[String], clutter: u64) -> (TaskLine, ScriptedTranscript) {
    let grid = grid_from_rows(rows).expect("generated maze is rectangular");
    let maze = maze_parse(&grid).expect("generated maze is valid");
    let path = maze_shortest_path(&maze).expect("generated maze is solvable");
    let line = TaskLine {
        id: id.to_string(),
        instruction: MAZE_INSTRUCTION.to_string(),
        images: vec![ImageSpec::Scene(SceneImage {
            scene: json!(rows),
            seed: Some(clutter),
            metadata: ImageMetadata::new(),
        })],
        gold: format_actions(&path),
        answer_mode: AnswerModeSpec::Name("action_sequence".into()),
        family: "maze".into(),
        capability_labels: labels(&[Capability::Generation, Capability::Perception, Capability::Logic]),
    };
    (line, maze_script())
}

/// The reconstructed case-study maze as a task with its four-turn script.
pub fn fig6_task() -> (TaskLine, ScriptedTranscript) {
    let rows: Vec<String> = FIG6_MAZE.iter().map(|s| s.to_string()).collect();
    let (mut line, script) = maze_task("maze-01", &rows, 6);
    line.gold = FIG6_ANSWER.to_string();
    (line, script)
}

fn random_maze(rng: &mut ChaCha8Rng, size: usize) -> Vec<String> {
    loop {
        let mut cells = vec![vec!['#'; size]; size];
        for row in cells.iter_mut().take(size - 1).skip(1) {
            for c in row.iter_mut().take(size - 1).skip(1) {
                *c = if rng.gen_bool(0.28) { '#' } else { '.' };
            }
        }
        let mut free = Vec::new();
        for r in 1..size - 1 {
            for c in 1..size - 1 {
                free.push((r, c));
            }
        }
        let s = free[rng.gen_range(0..free.len())];
        let g = free[rng.gen_range(0..free.len())];
        if s == g {
            continue;
        }
        cells[s.0][s.1] = 'S';
        cells[g.0][g.1] = 'G';
        let rows: Vec<String> = cells.iter().map(|r| r.iter().collect()).collect();
        let grid = grid_from_rows(&rows).expect("rectangular");
        let maze = maze_parse(&grid).expect("one start, one goal");
        if let Ok(path) = maze_shortest_path(&maze) {
            if path.len() >= 4 {
                return rows;
            }
        }
    }
}

fn expr_task(id: &str, expr: &str, tool: &str) -> (TaskLine, ScriptedTranscript) {
    let value = eval_expression(expr).expect("generated expression evaluates");
    let key = if tool == "code_agent" { "code" } else { "expr" };
    let line = TaskLine {
        id: id.to_string(),
        instruction: format!("Evaluate {expr}. Answer with the number only."),
        images: vec![],
        gold: fmt_num(value),
        answer_mode: AnswerModeSpec::Full(AnswerMode::Numeric { tolerance: 1e-4 }),
        family: "expression".into(),
        capability_labels: labels(&[Capability::Logic]),
    };
    let script = ScriptedTranscript {
        entries: vec![
            step(
                "Exact arithmetic is safer in code.",
                cap_call(Capability::Logic, tool, json!({ key: expr }), &[]),
            ),
            answer("Report the computed value.", "{{obs:value}}"),
        ],
    };
    (line, script)
}

fn random_expression(rng: &mut ChaCha8Rng, variant: usize) -> String {
    let mut n = |lo: i32, hi: i32| rng.gen_range(lo..=hi);
    match variant % 6 {
        0 => format!("{}*({}+{})-{}", n(2, 9), n(1, 20), n(1, 20), n(1, 30)),
        1 => format!("sqrt({})+{}^2", n(2, 12).pow(2), n(2, 9)),
        2 => format!("({}+{})/{}", n(10, 90), n(1, 40), n(2, 8)),
        3 => format!("max({},{})*min({},{})", n(1, 20), n(1, 20), n(1, 9), n(1, 9)),
        4 => format!("abs({}-{}*{})", n(1, 20), n(2, 9), n(2, 9)),
        _ => format!("2^{}-{}/({}+{})", n(2, 8), n(10, 60), n(1, 5), n(1, 5)),
    }
}

fn fmt_point(p: Point) -> String {
    format!("({}, {})", p.x, p.y)
}

fn random_polygon(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
    loop {
        let mut angles: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
        angles.sort_by(f64::total_cmp);
        let radius = f64::from(rng.gen_range(4..=10));
        let pts: Vec<Point> = angles
            .iter()
            .map(|a| Point {
                x: (radius * a.cos()).round() + 10.0,
                y: (radius * a.sin()).round() + 10.0,
            })
            .collect();
        if geometry::validate_polygon(&pts).is_ok() && geometry::signed_area(&pts).abs() > 1.0 {
            return pts;
        }
    }
}

fn polygon_task(id: &str, pts: &[Point]) -> (TaskLine, ScriptedTranscript) {
    let area = geometry::signed_area(pts).abs();
    let listed: Vec<String> = pts.iter().map(|p| fmt_point(*p)).collect();
    let coords: Vec<[f64; 2]> = pts.iter().map(|p| [p.x, p.y]).collect();
    let line = TaskLine {
        id: id.to_string(),
        instruction: format!(
            "A polygon has vertices {} in order. What is its area?",
            listed.join(", ")
        ),
        images: vec![],
        gold: fmt_num(area),
        answer_mode: AnswerModeSpec::Full(AnswerMode::Numeric { tolerance: 1e-3 }),
        family: "geometry".into(),
        capability_labels: labels(&[Capability::Spatial]),
    };
    let script = ScriptedTranscript {
        entries: vec![
            step(
                "Use the geometry calculator on the vertex list.",
                cap_call(
                    Capability::Spatial,
                    "geometry_calculator",
                    json!({"shape": "polygon", "points": coords}),
                    &[],
                ),
            ),
            answer("The area is in the observation.", "{{obs:area}}"),
        ],
    };
    (line, script)
}

fn perpendicular_task(id: &str, a: Point, b: Point, p: Point) -> (TaskLine, ScriptedTranscript) {
    let foot = geometry::geom_perp_intersect(a, b, p).expect("distinct endpoints");
    let line = TaskLine {
        id: id.to_string(),
        instruction: format!(
            "How far is the point {} from the line through {} and {}?",
            fmt_point(p),
            fmt_point(a),
            fmt_point(b)
        ),
        images: vec![],
        gold: fmt_num(geometry::point_distance(foot, p)),
        answer_mode: AnswerModeSpec::Full(AnswerMode::Numeric { tolerance: 1e-3 }),
        family: "geometry".into(),
        capability_labels: labels(&[Capability::Spatial]),
    };
    let script = ScriptedTranscript {
        entries: vec![
            step(
                "Drop a perpendicular from the point onto the line.",
                cap_call(
                    Capability::Spatial,
                    "geom_perp_intersect",
                    json!({"line": [[a.x, a.y], [b.x, b.y]], "point": [p.x, p.y]}),
                    &[],
                ),
            ),
            answer("The distance to the foot is the answer.", "{{obs:distance}}"),
        ],
    };
    (line, script)
}

fn distance_task(id: &str, p: Point, q: Point) -> (TaskLine, ScriptedTranscript) {
    let line = TaskLine {
        id: id.to_string(),
        instruction: format!("What is the distance between {} and {}?", fmt_point(p), fmt_point(q)),
        images: vec![],
        gold: fmt_num(geometry::point_distance(p, q)),
        answer_mode: AnswerModeSpec::Full(AnswerMode::Numeric { tolerance: 1e-3 }),
        family: "geometry".into(),
        capability_labels: labels(&[Capability::Spatial]),
    };
    let script = ScriptedTranscript {
        entries: vec![
            step(
                "Measure directly.",
                cap_call(
                    Capability::Spatial,
                    "point_distance",
                    json!({"p": [p.x, p.y], "q": [q.x, q.y]}),
                    &[],
                ),
            ),
            answer("Done.", "{{obs:distance}}"),
        ],
    };
    (line, script)
}

const SHAPES: [&str; 3] = ["circle", "square", "triangle"];
const CANVAS: u32 = 64;

fn shape_color(label: &str) -> Rgba<u8> {
    match label {
        "circle" => Rgba([30, 90, 220, 255]),
        "square" => Rgba([230, 140, 20, 255]),
        _ => Rgba([40, 160, 60, 255]),
    }
}

/// Draws non-overlapping shapes on a white canvas; returns PNG bytes and
/// the objects for the metadata side channel.
fn shapes_image(rng: &mut ChaCha8Rng, count: usize) -> (Vec<u8>, Vec<SceneObject>) {
    let mut img = RgbaImage::from_pixel(CANVAS, CANVAS, Rgba([255, 255, 255, 255]));
    let mut objects: Vec<SceneObject> = Vec::new();
    let mut attempts = 0;
    while objects.len() < count && attempts < 10_000 {
        attempts += 1;
        let size = rng.gen_range(6..=10u32);
        let x = rng.gen_range(1..CANVAS - size - 1);
        let y = rng.gen_range(1..CANVAS - size - 1);
        let overlaps = objects.iter().any(|o| {
            let [ox, oy, ow, oh] = o.bbox;
            f64::from(x) < ox + ow + 1.0
                && ox < f64::from(x + size) + 1.0
                && f64::from(y) < oy + oh + 1.0
                && oy < f64::from(y + size) + 1.0
        });
        if overlaps {
            continue;
        }
        let label = SHAPES[rng.gen_range(0..SHAPES.len())];
        let color = shape_color(label);
        let s = size as i64;
        for dy in 0..s {
            for dx in 0..s {
                let inside = match label {
                    "circle" => {
                        let (cx, cy) = (dx * 2 + 1 - s, dy * 2 + 1 - s);
                        cx * cx + cy * cy <= s * s
                    }
                    "square" => true,
                    _ => dx * 2 >= s - 1 - dy && dx * 2 <= s - 1 + dy,
                };
                if inside {
                    img.put_pixel(x + dx as u32, y + dy as u32, color);
                }
            }
        }
        objects.push(SceneObject {
            label: label.to_string(),
            bbox: [f64::from(x), f64::from(y), f64::from(size), f64::from(size)],
        });
    }
    let mut bytes = Vec::new();
    img.write_to(&mut io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .expect("png encoding to memory");
    (bytes, objects)
}

fn object_metadata(objects: &[SceneObject]) -> ImageMetadata {
    let mut metadata = ImageMetadata::new();
    write_objects(&mut metadata, objects);
    metadata.insert(META_CAPTION.into(), "coloured shapes on a white background".into());
    metadata
}

fn random_rect(rng: &mut ChaCha8Rng) -> Rect {
    let w = rng.gen_range(24..=40);
    let h = rng.gen_range(24..=40);
    Rect::new(rng.gen_range(0..=CANVAS - w), rng.gen_range(0..=CANVAS - h), w, h)
}

fn count_in(objects: &[SceneObject], rect: Option<Rect>, label: Option<&str>) -> usize {
    objects
        .iter()
        .filter(|o| label.map_or(true, |l| o.label == l))
        .filter(|o| {
            let (cx, cy) = o.center();
            rect.map_or(true, |r| r.contains(cx, cy))
        })
        .count()
}

enum CountKind {
    Whole(&'static str),
    Cropped(Rect),
    Marked(Rect),
}

fn count_task(
    id: &str,
    family: &str,
    file: &str,
    objects: &[SceneObject],
    kind: CountKind,
) -> (TaskLine, ScriptedTranscript) {
    let rect_json = |r: Rect| json!([r.x, r.y, r.w, r.h]);
    let (instruction, gold, caps, entries) = match kind {
        CountKind::Whole(label) => (
            format!("How many {label}s are in the image? Answer with a number."),
            count_in(objects, None, Some(label)),
            vec![Capability::Perception],
            vec![
                step(
                    "Ask the perception tool for object counts.",
                    cap_call(Capability::Perception, "region_caption", json!({}), &["{{input:0}}"]),
                ),
                answer("Read off the count.", &format!("{{{{obs:count.{label}}}}}")),
            ],
        ),
        CountKind::Cropped(r) => (
            format!(
                "How many shapes lie inside the region x={}, y={}, w={}, h={} (pixels)? Answer with a number.",
                r.x, r.y, r.w, r.h
            ),
            count_in(objects, Some(r), None),
            vec![Capability::Transform, Capability::Perception],
            vec![
                step(
                    "Crop to the region of interest first.",
                    cap_call(Capability::Transform, "crop", json!({"rect": rect_json(r)}), &["{{input:0}}"]),
                ),
                step(
                    "Count what remains in the crop.",
                    cap_call(Capability::Perception, "region_caption", json!({}), &["{{obs:image}}"]),
                ),
                answer("Report the count.", "{{obs:count}}"),
            ],
        ),
        CountKind::Marked(r) => (
            format!(
                "Mark the region x={}, y={}, w={}, h={} (pixels) with a box, then say how many shapes it contains.",
                r.x, r.y, r.w, r.h
            ),
            count_in(objects, Some(r), None),
            vec![Capability::Augmentation, Capability::Perception],
            vec![
                step(
                    "Outline the region so it stays in view.",
                    cap_call(
                        Capability::Augmentation,
                        "draw_bbox",
                        json!({"rect": rect_json(r), "label": "query"}),
                        &["{{input:0}}"],
                    ),
                ),
                step(
                    "Describe the marked region.",
                    cap_call(
                        Capability::Perception,
                        "region_caption",
                        json!({"rect": rect_json(r)}),
                        &["{{obs:image}}"],
                    ),
                ),
                answer("Report the count.", "{{obs:count}}"),
            ],
        ),
    };
    let line = TaskLine {
        id: id.to_string(),
        instruction,
        images: vec![ImageSpec::File(ImageFile {
            path: file.to_string(),
            metadata: object_metadata(objects),
        })],
        gold: gold.to_string(),
        answer_mode: AnswerModeSpec::Name("exact_text".into()),
        family: family.to_string(),
        capability_labels: labels(&caps),
    };
    (line, ScriptedTranscript { entries })
}

impl StarterSet {
    /// The 30-task set: six each of mazes, expressions, geometry, counting
    /// and marking.
    pub fn generate() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(STARTER_SEED);
        let mut tasks: Vec<(TaskLine, ScriptedTranscript)> = Vec::new();
        let mut files = BTreeMap::new();

        tasks.push(fig6_task());
        for i in 2..=6 {
            let size = if i % 2 == 0 { 7 } else { 8 };
            let rows = random_maze(&mut rng, size);
            tasks.push(maze_task(&format!("maze-{i:02}"), &rows, i as u64));
        }

        for i in 1..=6 {
            let expr = random_expression(&mut rng, i - 1);
            let tool = if i % 3 == 0 { "code_agent" } else { "eval_expression" };
            tasks.push(expr_task(&format!("expr-{i:02}"), &expr, tool));
        }

        for i in 1..=3 {
            let pts = random_polygon(&mut rng, 2 + i);
            tasks.push(polygon_task(&format!("geo-{i:02}"), &pts));
        }
        for i in 4..=5 {
            let mut pt = || Point {
                x: f64::from(rng.gen_range(-9..=9)),
                y: f64::from(rng.gen_range(-9..=9)),
            };
            let (a, mut b, p) = (pt(), pt(), pt());
            while b == a {
                b = pt();
            }
            tasks.push(perpendicular_task(&format!("geo-{i:02}"), a, b, p));
        }
        let p = Point { x: f64::from(rng.gen_range(-9..=9)), y: f64::from(rng.gen_range(-9..=9)) };
        let q = Point { x: f64::from(rng.gen_range(-9..=9)), y: f64::from(rng.gen_range(-9..=9)) };
        tasks.push(distance_task("geo-06", p, q));

        for i in 1..=6 {
            let id = format!("count-{i:02}");
            let file = format!("images/{id}.png");
            let n = rng.gen_range(5..=9);
            let (bytes, objects) = shapes_image(&mut rng, n);
            let kind = if i <= 3 {
                CountKind::Whole(SHAPES[(i - 1) % SHAPES.len()])
            } else {
                CountKind::Cropped(random_rect(&mut rng))
            };
            tasks.push(count_task(&id, "counting", &file, &objects, kind));
            files.insert(file, bytes);
        }
        for i in 1..=6 {
            let id = format!("mark-{i:02}");
            let file = format!("images/{id}.png");
            let n = rng.gen_range(5..=9);
            let (bytes, objects) = shapes_image(&mut rng, n);
            let rect = random_rect(&mut rng);
            tasks.push(count_task(&id, "marking", &file, &objects, CountKind::Marked(rect)));
            files.insert(file, bytes);
        }

        let mut scripts = BTreeMap::new();
        let mut lines = Vec::new();
        for (line, script) in tasks {
            scripts.insert(line.id.clone(), script);
            lines.push(line);
        }
        Self {
            lines,
            files,
            scripts: ScriptBook::new(scripts),
        }
    }

    /// The tasks named in `ids`, in that order, with their files and scripts.
    pub fn subset(&self, ids: &[&str]) -> Self {
        let lines: Vec<TaskLine> = ids
            .iter()
            .filter_map(|id| self.lines.iter().find(|l| l.id == *id).cloned())
            .collect();
        let mut files = BTreeMap::new();
        for line in &lines {
            for image in &line.images {
                if let ImageSpec::File(f) = image {
                    if let Some(bytes) = self.files.get(&f.path) {
                        files.insert(f.path.clone(), bytes.clone());
                    }
                }
            }
        }
        let scripts = lines
            .iter()
            .filter_map(|l| self.scripts.scripts.get(&l.id).map(|s| (l.id.clone(), s.clone())))
            .collect();
        Self {
            lines,
            files,
            scripts: ScriptBook::new(scripts),
        }
    }

    pub fn ablation() -> Self {
        Self::generate().subset(&ABLATION_TASK_IDS)
    }

    /// Just the case-study maze.
    pub fn fig6() -> Self {
        let (line, script) = fig6_task();
        Self {
            scripts: ScriptBook::new(BTreeMap::from([(line.id.clone(), script)])),
            lines: vec![line],
            files: BTreeMap::new(),
        }
    }

    pub fn tasks_jsonl(&self) -> String {
        let mut out = String::new();
        for line in &self.lines {
            out.push_str(&serde_json::to_string(line).expect("task line serializes"));
            out.push('\n');
        }
        out
    }

    pub fn scripts_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.scripts).expect("scripts serialize");
        s.push('\n');
        s
    }

    /// Loads the tasks without touching the file system.
    pub fn load(&self, store: &ImageStore) -> Result<Vec<TaskInstance>, TaskLoadError> {
        let read = |p: &str| self.files.get(p).cloned();
        parse_tasks_with(&self.tasks_jsonl(), &read, store)
    }

    /// Writes `tasks.jsonl`, `scripts.json` and `images/`.
    pub fn write_to(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("tasks.jsonl"), self.tasks_jsonl())?;
        fs::write(dir.join("scripts.json"), self.scripts_json())?;
        for (rel, bytes) in &self.files {
            let path = dir.join(rel);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(path, bytes)?;
        }
        Ok(())
    }
}
