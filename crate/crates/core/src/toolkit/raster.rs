//! Pixel-level tools: crop and annotation. Drawing is aliased (no blending
//! across pixel boundaries) so outputs are byte-stable.

use image::{Rgba, RgbaImage};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::images::{ImageError, ImageMetadata, ImageRef, ImageStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Rect {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Self { x, y, w, h }
    }

    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.w > 0
            && self.h > 0
            && u64::from(self.x) + u64::from(self.w) <= u64::from(width)
            && u64::from(self.y) + u64::from(self.h) <= u64::from(height)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= f64::from(self.x)
            && y >= f64::from(self.y)
            && x < f64::from(self.x) + f64::from(self.w)
            && y < f64::from(self.y) + f64::from(self.h)
    }

    pub fn as_array(&self) -> [u32; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationStyle {
    pub color: [u8; 4],
    pub stroke: u32,
}

impl Default for AnnotationStyle {
    fn default() -> Self {
        Self {
            color: [255, 0, 0, 255],
            stroke: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Annotation {
    Highlight(Rect),
    Arrow { from: (u32, u32), to: (u32, u32) },
    Bbox { rect: Rect, label: Option<String> },
}

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("rect outside image")]
    RectOutOfBounds,
    #[error("annotation geometry outside image")]
    GeometryOutOfBounds,
    #[error("arrow has zero length")]
    ZeroLengthArrow,
    #[error("stroke width must be at least 1")]
    BadStroke,
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// Labelled box carried in the `objects` metadata key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub label: String,
    pub bbox: [f64; 4],
}

impl SceneObject {
    pub fn center(&self) -> (f64, f64) {
        (self.bbox[0] + self.bbox[2] / 2.0, self.bbox[1] + self.bbox[3] / 2.0)
    }
}

pub const META_OBJECTS: &str = "objects";
pub const META_ANNOTATIONS: &str = "annotations";

pub fn read_objects(metadata: &ImageMetadata) -> Option<Vec<SceneObject>> {
    metadata
        .get(META_OBJECTS)
        .and_then(|s| serde_json::from_str(s).ok())
}

pub fn write_objects(metadata: &mut ImageMetadata, objects: &[SceneObject]) {
    metadata.insert(
        META_OBJECTS.into(),
        serde_json::to_string(objects).expect("objects serialize"),
    );
}

pub fn crop(store: &ImageStore, image_id: &str, rect: Rect) -> Result<ImageRef, RasterError> {
    let (stored, pixels) = store.decode(image_id)?;
    if !rect.fits(pixels.width(), pixels.height()) {
        return Err(RasterError::RectOutOfBounds);
    }
    let out = image::imageops::crop_imm(&pixels, rect.x, rect.y, rect.w, rect.h).to_image();

    let mut metadata = ImageMetadata::new();
    metadata.insert("source".into(), image_id.to_string());
    metadata.insert(
        "crop".into(),
        format!("{},{},{},{}", rect.x, rect.y, rect.w, rect.h),
    );
    if let Some(objects) = read_objects(&stored.metadata) {
        let kept: Vec<SceneObject> = objects
            .into_iter()
            .filter(|o| {
                let (cx, cy) = o.center();
                rect.contains(cx, cy)
            })
            .map(|o| SceneObject {
                bbox: [
                    o.bbox[0] - f64::from(rect.x),
                    o.bbox[1] - f64::from(rect.y),
                    o.bbox[2],
                    o.bbox[3],
                ],
                label: o.label,
            })
            .collect();
        write_objects(&mut metadata, &kept);
    }
    Ok(store.insert_rgba(&out, metadata)?)
}

fn put(img: &mut RgbaImage, x: i64, y: i64, color: Rgba<u8>) {
    if x >= 0 && y >= 0 && (x as u64) < u64::from(img.width()) && (y as u64) < u64::from(img.height()) {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn brush(img: &mut RgbaImage, x: i64, y: i64, stroke: u32, color: Rgba<u8>) {
    let lo = -((i64::from(stroke) - 1) / 2);
    let hi = i64::from(stroke) / 2;
    for dy in lo..=hi {
        for dx in lo..=hi {
            put(img, x + dx, y + dy, color);
        }
    }
}

/// Bresenham line with a square brush.
fn line(img: &mut RgbaImage, from: (i64, i64), to: (i64, i64), stroke: u32, color: Rgba<u8>) {
    let (mut x0, mut y0) = from;
    let (x1, y1) = to;
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        brush(img, x0, y0, stroke, color);
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

fn fill(img: &mut RgbaImage, rect: Rect, color: Rgba<u8>) {
    for y in rect.y..rect.y + rect.h {
        for x in rect.x..rect.x + rect.w {
            img.put_pixel(x, y, color);
        }
    }
}

fn draw(img: &mut RgbaImage, annotation: &Annotation, style: AnnotationStyle) -> Result<(), RasterError> {
    let (w, h) = (img.width(), img.height());
    let color = Rgba(style.color);
    match annotation {
        Annotation::Highlight(rect) => {
            if !rect.fits(w, h) {
                return Err(RasterError::GeometryOutOfBounds);
            }
            for y in rect.y..rect.y + rect.h {
                for x in rect.x..rect.x + rect.w {
                    let px = img.get_pixel_mut(x, y);
                    for c in 0..3 {
                        px.0[c] = ((u16::from(px.0[c]) + u16::from(style.color[c])) / 2) as u8;
                    }
                }
            }
        }
        Annotation::Arrow { from, to } => {
            if from == to {
                return Err(RasterError::ZeroLengthArrow);
            }
            if from.0 >= w || from.1 >= h || to.0 >= w || to.1 >= h {
                return Err(RasterError::GeometryOutOfBounds);
            }
            let (fx, fy) = (i64::from(from.0), i64::from(from.1));
            let (tx, ty) = (i64::from(to.0), i64::from(to.1));
            line(img, (fx, fy), (tx, ty), style.stroke, color);
            let angle = ((fy - ty) as f64).atan2((fx - tx) as f64);
            let head = f64::from((3 * style.stroke).max(4));
            for spread in [-0.5_f64, 0.5] {
                let a = angle + spread;
                let hx = (tx as f64 + head * a.cos()).round() as i64;
                let hy = (ty as f64 + head * a.sin()).round() as i64;
                let hx = hx.clamp(0, i64::from(w) - 1);
                let hy = hy.clamp(0, i64::from(h) - 1);
                line(img, (tx, ty), (hx, hy), style.stroke, color);
            }
        }
        Annotation::Bbox { rect, label } => {
            if !rect.fits(w, h) {
                return Err(RasterError::GeometryOutOfBounds);
            }
            let s = style.stroke.min(rect.w).min(rect.h);
            fill(img, Rect::new(rect.x, rect.y, rect.w, s), color);
            fill(img, Rect::new(rect.x, rect.y + rect.h - s, rect.w, s), color);
            fill(img, Rect::new(rect.x, rect.y, s, rect.h), color);
            fill(img, Rect::new(rect.x + rect.w - s, rect.y, s, rect.h), color);
            if let Some(label) = label.as_deref().filter(|l| !l.is_empty()) {
                // a solid tab sized by label length; the text itself goes to metadata
                let tab_w = (4 * label.chars().count() as u32 + 2).min(rect.w);
                let tab_h = 7.min(rect.h);
                fill(img, Rect::new(rect.x, rect.y, tab_w, tab_h), color);
            }
        }
    }
    Ok(())
}

fn annotation_record(annotation: &Annotation, style: AnnotationStyle) -> Value {
    let color = format!(
        "#{:02x}{:02x}{:02x}",
        style.color[0], style.color[1], style.color[2]
    );
    match annotation {
        Annotation::Highlight(r) => json!({"kind": "highlight", "rect": r.as_array(), "color": color}),
        Annotation::Arrow { from, to } => {
            json!({"kind": "arrow", "from": [from.0, from.1], "to": [to.0, to.1], "color": color})
        }
        Annotation::Bbox { rect, label } => {
            json!({"kind": "bbox", "rect": rect.as_array(), "label": label, "color": color})
        }
    }
}

/// Draws onto a copy of the image; the source is left untouched.
pub fn annotate(
    store: &ImageStore,
    image_id: &str,
    annotation: &Annotation,
    style: AnnotationStyle,
) -> Result<ImageRef, RasterError> {
    if style.stroke == 0 {
        return Err(RasterError::BadStroke);
    }
    let (stored, mut pixels) = store.decode(image_id)?;
    draw(&mut pixels, annotation, style)?;

    let mut metadata = stored.metadata.clone();
    let mut records: Vec<Value> = metadata
        .get(META_ANNOTATIONS)
        .and_then(|s| serde_json::from_str(s).ok())
        .unwrap_or_default();
    records.push(annotation_record(annotation, style));
    metadata.insert(
        META_ANNOTATIONS.into(),
        serde_json::to_string(&records).expect("records serialize"),
    );
    metadata.insert("source".into(), image_id.to_string());
    Ok(store.insert_rgba(&pixels, metadata)?)
}

pub fn parse_color(text: &str) -> Option<[u8; 4]> {
    let named = match text.trim().to_ascii_lowercase().as_str() {
        "red" => Some([255, 0, 0, 255]),
        "green" => Some([0, 160, 0, 255]),
        "blue" => Some([0, 0, 255, 255]),
        "yellow" => Some([255, 220, 0, 255]),
        "black" => Some([0, 0, 0, 255]),
        "white" => Some([255, 255, 255, 255]),
        _ => None,
    };
    if named.is_some() {
        return named;
    }
    let hex = text.trim().strip_prefix('#')?;
    if hex.len() != 6 {
        return None;
    }
    let byte = |i: usize| u8::from_str_radix(&hex[i..i + 2], 16).ok();
    Some([byte(0)?, byte(2)?, byte(4)?, 255])
}
