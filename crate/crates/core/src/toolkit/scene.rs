//! Structured scenes: grid-scene descriptions, clean grid rendering,
//! `simplify_image` and `region_caption`.
//!
//! Scene format (version 1):
//!
//! ```json
//! {"kind": "grid_scene", "version": 1, "cells": ["#####", "#S.G#", "#####"]}
//! ```
//!
//! Cell codes are `.` free, `#` obstacle, `S` start and `G` goal. Images carry
//! a scene in their `scene` metadata key.

use image::{Rgba, RgbaImage};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::maze::{grid_from_json, grid_rows, maze_parse, CellCode, CellGrid, MazeError};
use super::raster::{read_objects, Rect};
use crate::images::{ImageMetadata, ImageRef, ImageStore, StoredImage};

pub const SCENE_KIND: &str = "grid_scene";
pub const SCENE_VERSION: u32 = 1;
pub const META_SCENE: &str = "scene";
pub const META_CAPTION: &str = "caption";
pub const CELL_PX: u32 = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneDescription {
    pub kind: String,
    pub version: u32,
    pub cells: Vec<String>,
}

impl SceneDescription {
    pub fn from_grid(grid: &CellGrid) -> Self {
        Self {
            kind: SCENE_KIND.into(),
            version: SCENE_VERSION,
            cells: grid_rows(grid),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("scene serializes")
    }
}

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("no structured grid: pass a scene description or an image that carries one")]
    NoStructuredGrid,
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error(transparent)]
    Maze(#[from] MazeError),
}

/// Where `simplify_image` reads its input from.
pub enum SceneSource<'a> {
    Description(&'a Value),
    Image(&'a StoredImage),
}

fn grid_from_scene_value(value: &Value) -> Result<CellGrid, SceneError> {
    match value {
        Value::Null => Err(SceneError::NoStructuredGrid),
        Value::Object(map) if map.is_empty() => Err(SceneError::NoStructuredGrid),
        Value::Object(map) => {
            if let Some(kind) = map.get("kind").and_then(Value::as_str) {
                if kind != SCENE_KIND {
                    return Err(SceneError::InvalidScene(format!("unsupported kind {kind:?}")));
                }
            }
            if let Some(v) = map.get("version").and_then(Value::as_u64) {
                if v != u64::from(SCENE_VERSION) {
                    return Err(SceneError::InvalidScene(format!("unsupported version {v}")));
                }
            }
            let cells = map.get("cells").ok_or(SceneError::NoStructuredGrid)?;
            Ok(grid_from_json(cells)?)
        }
        Value::String(s) if s.trim().is_empty() => Err(SceneError::NoStructuredGrid),
        // a JSON-encoded scene passed as a string, or bare rows
        Value::String(s) => match serde_json::from_str::<Value>(s) {
            Ok(inner @ Value::Object(_)) => grid_from_scene_value(&inner),
            _ => Ok(grid_from_json(value)?),
        },
        Value::Array(_) => Ok(grid_from_json(value)?),
        other => Err(SceneError::InvalidScene(format!("unexpected scene value {other}"))),
    }
}

/// Extracts the clean cell grid from a scene description or image metadata.
pub fn simplify_image(source: SceneSource<'_>) -> Result<CellGrid, SceneError> {
    let grid = match source {
        SceneSource::Description(v) => grid_from_scene_value(v)?,
        SceneSource::Image(img) => {
            let raw = img.metadata.get(META_SCENE).ok_or(SceneError::NoStructuredGrid)?;
            let v: Value = serde_json::from_str(raw)
                .map_err(|e| SceneError::InvalidScene(e.to_string()))?;
            grid_from_scene_value(&v)?
        }
    };
    if grid.is_empty() || grid[0].is_empty() {
        return Err(SceneError::NoStructuredGrid);
    }
    if grid.iter().any(|row| row.len() != grid[0].len()) {
        return Err(SceneError::Maze(MazeError::NonRectangular));
    }
    Ok(grid)
}

fn cell_color(code: CellCode) -> Rgba<u8> {
    match code {
        CellCode::Empty => Rgba([255, 255, 255, 255]),
        CellCode::Obstacle => Rgba([40, 40, 40, 255]),
        CellCode::Start => Rgba([0, 170, 0, 255]),
        CellCode::Goal => Rgba([220, 0, 0, 255]),
    }
}

/// Renders a grid with `CELL_PX` square cells and 1px grid lines.
pub fn render_grid(grid: &CellGrid) -> RgbaImage {
    let rows = grid.len() as u32;
    let cols = grid.first().map_or(0, |r| r.len()) as u32;
    RgbaImage::from_fn(cols * CELL_PX, rows * CELL_PX, |x, y| {
        if x % CELL_PX == 0 || y % CELL_PX == 0 {
            return Rgba([160, 160, 160, 255]);
        }
        cell_color(grid[(y / CELL_PX) as usize][(x / CELL_PX) as usize])
    })
}

/// Like [`render_grid`] with deterministic speckle noise, standing in for a
/// raw, cluttered maze picture.
pub fn render_cluttered_grid(grid: &CellGrid, seed: u64) -> RgbaImage {
    let mut img = render_grid(grid);
    let mut state = seed ^ 0x9E37_79B9_7F4A_7C15;
    for px in img.pixels_mut() {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        if (state >> 59) == 0 {
            let shade = (state >> 32) as u8 | 0x40;
            *px = Rgba([shade, shade / 2, 255 - shade, 255]);
        }
    }
    img
}

/// Stores a clean rendering of `grid` with the scene in metadata.
pub fn store_grid_image(store: &ImageStore, grid: &CellGrid) -> Result<ImageRef, crate::images::ImageError> {
    let mut metadata = ImageMetadata::new();
    metadata.insert(META_SCENE.into(), SceneDescription::from_grid(grid).to_json());
    store.insert_rgba(&render_grid(grid), metadata)
}

/// `key=value` description of an image (or a region of it) built from its
/// side-channel metadata.
pub fn region_caption(image: &StoredImage, rect: Option<Rect>) -> Result<String, SceneError> {
    let r = &image.reference;
    if let Some(rect) = rect {
        if !rect.fits(r.width, r.height) {
            return Err(SceneError::InvalidScene("rect outside image".into()));
        }
    }
    let mut lines = vec![format!("size={}x{}", r.width, r.height)];
    if let Some(rect) = rect {
        lines.push(format!("region={},{},{},{}", rect.x, rect.y, rect.w, rect.h));
    }

    if image.metadata.contains_key(META_SCENE) {
        let grid = simplify_image(SceneSource::Image(image))?;
        let rows = grid_rows(&grid);
        lines.push(format!("rows={}", grid.len()));
        lines.push(format!("cols={}", grid[0].len()));
        match maze_parse(&grid) {
            Ok(maze) => {
                lines.push(format!("start={},{}", maze.start.0, maze.start.1));
                lines.push(format!("goal={},{}", maze.goal.0, maze.goal.1));
                lines.push(format!("obstacles={}", maze.obstacles.len()));
            }
            Err(e) => lines.push(format!("layout_error={e}")),
        }
        lines.push(format!("grid={}", rows.join("/")));
    }

    if let Some(objects) = read_objects(&image.metadata) {
        let inside: Vec<_> = objects
            .iter()
            .filter(|o| {
                let (cx, cy) = o.center();
                rect.map_or(true, |r| r.contains(cx, cy))
            })
            .collect();
        lines.push(format!("count={}", inside.len()));
        let mut per_label = std::collections::BTreeMap::<&str, usize>::new();
        for o in &inside {
            *per_label.entry(o.label.as_str()).or_default() += 1;
        }
        for (label, n) in per_label {
            lines.push(format!("count.{label}={n}"));
        }
    }

    if let Some(caption) = image.metadata.get(META_CAPTION) {
        lines.push(format!("caption={caption}"));
    }
    if lines.len() == 1 + usize::from(rect.is_some()) {
        lines.push("caption=(no description available)".into());
    }
    Ok(lines.join("\n"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toolkit::maze::grid_from_rows;
    use crate::toolkit::raster::{write_objects, SceneObject};
    use serde_json::json;

    const MAZE7: [&str; 7] = [
        "#######", "#.....#", "#.....#", "#G##.##", "##...S#", "#.....#", "#######",
    ];

    #[test]
    fn scene_of_seven_by_seven_maze() {
        let scene = json!({"kind": "grid_scene", "version": 1, "cells": MAZE7});
        let grid = simplify_image(SceneSource::Description(&scene)).unwrap();
        assert_eq!(grid.len(), 7);
        assert!(grid.iter().all(|r| r.len() == 7));
    }

    #[test]
    fn empty_scene_has_no_grid() {
        for v in [json!({}), Value::Null, json!("")] {
            assert!(matches!(
                simplify_image(SceneSource::Description(&v)),
                Err(SceneError::NoStructuredGrid)
            ));
        }
        let store = ImageStore::new();
        let r = store.insert_rgba(&RgbaImage::new(2, 2), ImageMetadata::new()).unwrap();
        let img = store.get(&r.id).unwrap();
        assert!(matches!(simplify_image(SceneSource::Image(&img)), Err(SceneError::NoStructuredGrid)));
    }

    #[test]
    fn scene_rejects_wrong_kind_and_ragged_rows() {
        let v = json!({"kind": "photo", "cells": ["S.G"]});
        assert!(matches!(simplify_image(SceneSource::Description(&v)), Err(SceneError::InvalidScene(_))));
        let v = json!({"cells": ["S.G", "."]});
        assert!(matches!(
            simplify_image(SceneSource::Description(&v)),
            Err(SceneError::Maze(MazeError::NonRectangular))
        ));
    }

    #[test]
    fn image_metadata_round_trip() {
        let store = ImageStore::new();
        let grid = grid_from_rows(&MAZE7).unwrap();
        let mut meta = ImageMetadata::new();
        meta.insert(META_SCENE.into(), SceneDescription::from_grid(&grid).to_json());
        let raw = store.insert_rgba(&render_cluttered_grid(&grid, 3), meta).unwrap();
        let simplified = simplify_image(SceneSource::Image(&store.get(&raw.id).unwrap())).unwrap();
        assert_eq!(simplified, grid);
        let clean = store_grid_image(&store, &simplified).unwrap();
        assert_eq!((clean.width, clean.height), (7 * CELL_PX, 7 * CELL_PX));
        assert_ne!(clean.id, raw.id);
    }

    #[test]
    fn caption_describes_grid() {
        let store = ImageStore::new();
        let grid = grid_from_rows(&MAZE7).unwrap();
        let r = store_grid_image(&store, &grid).unwrap();
        let text = region_caption(&store.get(&r.id).unwrap(), None).unwrap();
        assert!(text.contains("start=4,5"));
        assert!(text.contains("goal=3,1"));
        assert!(text.contains(&format!("grid={}", MAZE7.join("/"))));
    }

    #[test]
    fn caption_counts_objects_in_region() {
        let store = ImageStore::new();
        let mut meta = ImageMetadata::new();
        write_objects(
            &mut meta,
            &[
                SceneObject { label: "square".into(), bbox: [1.0, 1.0, 4.0, 4.0] },
                SceneObject { label: "circle".into(), bbox: [10.0, 1.0, 4.0, 4.0] },
                SceneObject { label: "square".into(), bbox: [30.0, 30.0, 4.0, 4.0] },
            ],
        );
        meta.insert(META_CAPTION.into(), "shapes".into());
        let r = store.insert_rgba(&RgbaImage::new(40, 40), meta).unwrap();
        let img = store.get(&r.id).unwrap();
        let all = region_caption(&img, None).unwrap();
        assert!(all.contains("count=3\ncount.circle=1\ncount.square=2"));
        assert!(all.contains("caption=shapes"));
        let part = region_caption(&img, Some(Rect::new(0, 0, 20, 20))).unwrap();
        assert!(part.contains("count=2\ncount.circle=1\ncount.square=1"));
        assert!(region_caption(&img, Some(Rect::new(30, 30, 20, 20))).is_err());
    }

    #[test]
    fn caption_without_metadata() {
        let store = ImageStore::new();
        let r = store.insert_rgba(&RgbaImage::new(3, 3), ImageMetadata::new()).unwrap();
        let text = region_caption(&store.get(&r.id).unwrap(), None).unwrap();
        assert_eq!(text, "size=3x3\ncaption=(no description available)");
    }
}
