//! Planar geometry: shoelace area, perimeters, perpendicular feet and distances.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }

    fn dot(self, o: Point) -> f64 {
        self.x * o.x + self.y * o.y
    }

    fn cross(self, o: Point) -> f64 {
        self.x * o.y - self.y * o.x
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Shape2D {
    Polygon(Vec<Point>),
    Circle { center: Point, radius: f64 },
    Segment(Point, Point),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub area: f64,
    pub perimeter: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("polygon needs at least 3 vertices, got {0}")]
    TooFewVertices(usize),
    #[error("polygon has repeated consecutive vertex at index {0}")]
    RepeatedVertex(usize),
    #[error("polygon is self-intersecting")]
    SelfIntersectingPolygon,
    #[error("circle radius must be positive")]
    NonPositiveRadius,
    #[error("line endpoints coincide")]
    DegenerateLine,
    #[error("coordinates must be finite")]
    NonFinite,
}

pub fn point_distance(p: Point, q: Point) -> f64 {
    (p.x - q.x).hypot(p.y - q.y)
}

/// Signed shoelace area (positive for counter-clockwise vertex order).
pub fn signed_area(vertices: &[Point]) -> f64 {
    let n = vertices.len();
    let twice: f64 = (0..n)
        .map(|i| vertices[i].cross(vertices[(i + 1) % n]))
        .sum();
    twice / 2.0
}

pub fn perimeter(vertices: &[Point]) -> f64 {
    let n = vertices.len();
    (0..n)
        .map(|i| point_distance(vertices[i], vertices[(i + 1) % n]))
        .sum()
}

fn orientation(a: Point, b: Point, c: Point) -> f64 {
    b.sub(a).cross(c.sub(a))
}

fn on_segment(a: Point, b: Point, p: Point) -> bool {
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

/// Closed-segment intersection test, including touching and collinear overlap.
pub fn segments_intersect(p1: Point, p2: Point, q1: Point, q2: Point) -> bool {
    let d1 = orientation(q1, q2, p1);
    let d2 = orientation(q1, q2, p2);
    let d3 = orientation(p1, p2, q1);
    let d4 = orientation(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(q1, q2, p1))
        || (d2 == 0.0 && on_segment(q1, q2, p2))
        || (d3 == 0.0 && on_segment(p1, p2, q1))
        || (d4 == 0.0 && on_segment(p1, p2, q2))
}

/// True when no two edges meet except adjacent edges at their shared vertex.
pub fn is_simple(vertices: &[Point]) -> bool {
    let n = vertices.len();
    let edge = |i: usize| (vertices[i], vertices[(i + 1) % n]);
    for i in 0..n {
        let (a, b) = edge(i);
        for j in (i + 1)..n {
            let (c, d) = edge(j);
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                // adjacent edges share one vertex; they may only overlap there
                let (shared, other_i, other_j) = if j == i + 1 { (b, a, d) } else { (a, b, c) };
                let u = other_i.sub(shared);
                let v = other_j.sub(shared);
                if u.cross(v) == 0.0 && u.dot(v) > 0.0 {
                    return false;
                }
                continue;
            }
            if segments_intersect(a, b, c, d) {
                return false;
            }
        }
    }
    true
}

pub fn validate_polygon(vertices: &[Point]) -> Result<(), GeometryError> {
    if vertices.len() < 3 {
        return Err(GeometryError::TooFewVertices(vertices.len()));
    }
    if vertices.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    let n = vertices.len();
    if let Some(i) = (0..n).find(|&i| vertices[i] == vertices[(i + 1) % n]) {
        return Err(GeometryError::RepeatedVertex((i + 1) % n));
    }
    if !is_simple(vertices) {
        return Err(GeometryError::SelfIntersectingPolygon);
    }
    Ok(())
}

pub fn geometry_calculator(shape: &Shape2D) -> Result<Measurement, GeometryError> {
    match shape {
        Shape2D::Polygon(vertices) => {
            validate_polygon(vertices)?;
            Ok(Measurement {
                area: signed_area(vertices).abs(),
                perimeter: perimeter(vertices),
            })
        }
        Shape2D::Circle { center, radius } => {
            if !center.x.is_finite() || !center.y.is_finite() || !radius.is_finite() {
                return Err(GeometryError::NonFinite);
            }
            if *radius <= 0.0 {
                return Err(GeometryError::NonPositiveRadius);
            }
            Ok(Measurement {
                area: PI * radius * radius,
                perimeter: 2.0 * PI * radius,
            })
        }
        Shape2D::Segment(p, q) => Ok(Measurement {
            area: 0.0,
            perimeter: point_distance(*p, *q),
        }),
    }
}

/// Foot of the perpendicular from `p` to the infinite line through `a` and `b`.
pub fn geom_perp_intersect(a: Point, b: Point, p: Point) -> Result<Point, GeometryError> {
    if a == b {
        return Err(GeometryError::DegenerateLine);
    }
    let d = b.sub(a);
    let t = p.sub(a).dot(d) / d.dot(d);
    Ok(Point::new(a.x + t * d.x, a.y + t * d.y))
}

/// `(foot - p) · unit(b - a)`; zero for an exact perpendicular foot.
pub fn orthogonality_residual(a: Point, b: Point, p: Point, foot: Point) -> f64 {
    let d = b.sub(a);
    let len = d.dot(d).sqrt();
    foot.sub(p).dot(d) / len
}
