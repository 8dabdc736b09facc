//! Independent oracles and input generators shared by the property and
//! acceptance suites.
#![allow(dead_code)]

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::Rng;

use capstep_core::protocol::{ReasoningTurn, Tag};
use capstep_core::toolkit::geometry::Point;
use capstep_core::toolkit::maze::{Action, CellCode, CellGrid, GridMaze};

// ---------------------------------------------------------------------------
// tag soup

const FRAGMENTS: &[&str] = &[
    "<think>", "</think>", "<cap>", "</cap>", "<tool_call>", "</tool_call>", "<answer>", "</answer>",
    "<", ">", "</", "<think", "answer>", "<Answer>", "< cap>", "<<", "/>", "{\"name\":\"crop\"}", "{",
    "}", "Logic", "L,U,D", "  ", "\n", "\t", "x", "hello world", "é", "日本", "🙂", "&lt;", "\\", "\"",
];

/// Random concatenation of tag fragments, text and multi-byte characters.
pub fn tag_soup(rng: &mut impl Rng) -> String {
    let n = rng.gen_range(0..40);
    let mut out = String::new();
    for _ in 0..n {
        if rng.gen_bool(0.15) {
            let len = rng.gen_range(1..6);
            out.extend((0..len).map(|_| char::from_u32(rng.gen_range(0x20..0x2FF)).unwrap_or('?')));
        } else {
            out.push_str(FRAGMENTS.choose(rng).unwrap());
        }
    }
    out
}

/// Reference scanner: at each byte position, the first tag whose opener
/// matches there and whose closer appears later claims the region; scanning
/// resumes after the closer. Returns (tag, inner) of the first region per tag.
pub fn reference_regions(raw: &str) -> Vec<(Tag, String)> {
    let tags = [Tag::Think, Tag::Cap, Tag::ToolCall, Tag::Answer];
    let bytes = raw.as_bytes();
    let mut found: Vec<(Tag, String)> = Vec::new();
    let mut i = 0;
    'outer: while i < bytes.len() {
        for tag in tags {
            let open = format!("<{}>", tag.name());
            let close = format!("</{}>", tag.name());
            if raw.is_char_boundary(i) && raw[i..].starts_with(&open) {
                let body = i + open.len();
                if let Some(rel) = raw[body..].find(&close) {
                    if !found.iter().any(|(t, _)| *t == tag) {
                        found.push((tag, raw[body..body + rel].to_string()));
                    }
                    i = body + rel + close.len();
                    continue 'outer;
                }
            }
        }
        i += 1;
    }
    found
}

/// Structural checks a parse must satisfy. Returns a description of the
/// first problem.
pub fn check_lossless(raw: &str, turn: &ReasoningTurn) -> Result<(), String> {
    if turn.reassemble() != raw {
        return Err("reassembly differs from input".into());
    }
    let mut at = 0;
    for seg in &turn.segments {
        if seg.span.start != at {
            return Err(format!("gap or overlap at byte {at}"));
        }
        if raw[seg.span.start..seg.span.end] != seg.render() {
            return Err(format!("span {:?} does not match its segment", seg.span));
        }
        at = seg.span.end;
    }
    if at != raw.len() {
        return Err("segments do not cover the input".into());
    }
    let expected = reference_regions(raw);
    for tag in [Tag::Think, Tag::Cap, Tag::ToolCall, Tag::Answer] {
        let want = expected.iter().find(|(t, _)| *t == tag).map(|(_, s)| s.trim());
        if turn.inner(tag) != want {
            return Err(format!("{} inner {:?} != reference {:?}", tag.name(), turn.inner(tag), want));
        }
    }
    if turn.terminal != turn.has(Tag::Answer) {
        return Err("terminal flag disagrees with answer presence".into());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// expressions

#[derive(Debug, Clone)]
pub enum Expr {
    Num(f64),
    Neg(Box<Expr>),
    Bin(char, Box<Expr>, Box<Expr>),
    Call(&'static str, Vec<Expr>),
}

pub fn random_expr(rng: &mut impl Rng, depth: u32) -> Expr {
    if depth == 0 || rng.gen_bool(0.3) {
        let v = if rng.gen_bool(0.7) {
            rng.gen_range(0..20) as f64
        } else {
            (rng.gen_range(0..2000) as f64) / 100.0
        };
        return Expr::Num(v);
    }
    match rng.gen_range(0..10) {
        0 => Expr::Neg(Box::new(random_expr(rng, depth - 1))),
        1 => {
            let f = *["sqrt", "abs"].choose(rng).unwrap();
            Expr::Call(f, vec![random_expr(rng, depth - 1)])
        }
        2 => {
            let f = *["min", "max"].choose(rng).unwrap();
            Expr::Call(f, vec![random_expr(rng, depth - 1), random_expr(rng, depth - 1)])
        }
        3 => Expr::Bin('^', Box::new(random_expr(rng, depth - 1)), Box::new(Expr::Num(rng.gen_range(0..4) as f64))),
        _ => {
            let op = *['+', '-', '*', '/'].choose(rng).unwrap();
            Expr::Bin(op, Box::new(random_expr(rng, depth - 1)), Box::new(random_expr(rng, depth - 1)))
        }
    }
}

/// Fully parenthesized source text.
pub fn render_expr(e: &Expr) -> String {
    match e {
        Expr::Num(v) => format!("{v}"),
        Expr::Neg(x) => format!("(-{})", render_expr(x)),
        Expr::Bin(op, a, b) => format!("({} {op} {})", render_expr(a), render_expr(b)),
        Expr::Call(f, args) => {
            let inner: Vec<String> = args.iter().map(render_expr).collect();
            format!("{f}({})", inner.join(", "))
        }
    }
}

/// Direct tree evaluation; `None` where the evaluator must report an error.
pub fn eval_tree(e: &Expr) -> Option<f64> {
    let v = match e {
        Expr::Num(v) => *v,
        Expr::Neg(x) => -eval_tree(x)?,
        Expr::Bin(op, a, b) => {
            let (a, b) = (eval_tree(a)?, eval_tree(b)?);
            match op {
                '+' => a + b,
                '-' => a - b,
                '*' => a * b,
                '/' => {
                    if b == 0.0 {
                        return None;
                    }
                    a / b
                }
                '^' => a.powf(b),
                _ => unreachable!(),
            }
        }
        Expr::Call(f, args) => {
            let vals: Option<Vec<f64>> = args.iter().map(eval_tree).collect();
            let vals = vals?;
            match *f {
                "sqrt" if vals[0] < 0.0 => return None,
                "sqrt" => vals[0].sqrt(),
                "abs" => vals[0].abs(),
                "min" => vals[0].min(vals[1]),
                "max" => vals[0].max(vals[1]),
                _ => unreachable!(),
            }
        }
    };
    v.is_finite().then_some(v)
}

pub fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

// ---------------------------------------------------------------------------
// geometry

/// Star-shaped (hence simple) counter-clockwise polygon with `n >= 4`
/// vertices. Angles are jittered around even spacing so every angular gap is
/// below pi and the center stays inside.
pub fn star_polygon(rng: &mut impl Rng, n: usize) -> Vec<Point> {
    assert!(n >= 4);
    let cx = rng.gen_range(-50.0..50.0);
    let cy = rng.gen_range(-50.0..50.0);
    let step = std::f64::consts::TAU / n as f64;
    (0..n)
        .map(|i| {
            let a = (i as f64 + rng.gen_range(0.1..0.9)) * step;
            let r = rng.gen_range(2.0..20.0);
            Point::new(cx + r * a.cos(), cy + r * a.sin())
        })
        .collect()
}

/// Even-odd ray casting.
pub fn inside(poly: &[Point], x: f64, y: f64) -> bool {
    let mut c = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let (pi, pj) = (poly[i], poly[j]);
        if (pi.y > y) != (pj.y > y) && x < (pj.x - pi.x) * (y - pi.y) / (pj.y - pi.y) + pi.x {
            c = !c;
        }
        j = i;
    }
    c
}

/// Monte-Carlo area estimate from `samples` uniform points in the bounding box.
pub fn monte_carlo_area(rng: &mut impl Rng, poly: &[Point], samples: usize) -> f64 {
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in poly {
        x0 = x0.min(p.x);
        x1 = x1.max(p.x);
        y0 = y0.min(p.y);
        y1 = y1.max(p.y);
    }
    let hits = (0..samples)
        .filter(|_| inside(poly, rng.gen_range(x0..x1), rng.gen_range(y0..y1)))
        .count();
    (x1 - x0) * (y1 - y0) * hits as f64 / samples as f64
}

// ---------------------------------------------------------------------------
// mazes

/// Shortest distance by repeated relaxation (Bellman-Ford style) rather than
/// a queue; `None` when the goal is unreachable.
pub fn dp_distance(m: &GridMaze) -> Option<usize> {
    let (rows, cols) = (m.rows, m.cols);
    let mut dist = vec![usize::MAX; rows * cols];
    dist[m.start.0 * cols + m.start.1] = 0;
    loop {
        let mut changed = false;
        for r in 0..rows {
            for c in 0..cols {
                if !m.is_free((r, c)) {
                    continue;
                }
                let here = r * cols + c;
                let neighbors = [
                    (r.wrapping_sub(1), c),
                    (r + 1, c),
                    (r, c.wrapping_sub(1)),
                    (r, c + 1),
                ];
                for (nr, nc) in neighbors {
                    if nr < rows && nc < cols && m.is_free((nr, nc)) {
                        let d = dist[nr * cols + nc];
                        if d != usize::MAX && d + 1 < dist[here] {
                            dist[here] = d + 1;
                            changed = true;
                        }
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
    let d = dist[m.goal.0 * cols + m.goal.1];
    (d != usize::MAX).then_some(d)
}

/// Walks `actions` from start; true when every step stays on free cells and
/// ends on the goal.
pub fn path_is_valid(m: &GridMaze, actions: &[Action]) -> bool {
    let mut at = m.start;
    for &a in actions {
        match m.step(at, a) {
            Some(next) => at = next,
            None => return false,
        }
    }
    at == m.goal
}

/// Every maze up to `max_side` x `max_side` with at most `max_obstacles`
/// obstacles, passed to `visit`.
pub fn for_each_small_maze(max_side: usize, max_obstacles: usize, mut visit: impl FnMut(&CellGrid)) {
    for rows in 1..=max_side {
        for cols in 1..=max_side {
            let n = rows * cols;
            if n < 2 {
                continue;
            }
            for s in 0..n {
                for g in 0..n {
                    if s == g {
                        continue;
                    }
                    let rest: Vec<usize> = (0..n).filter(|&i| i != s && i != g).collect();
                    subsets(&rest, max_obstacles, &mut |obs| {
                        let mut grid = vec![vec![CellCode::Empty; cols]; rows];
                        grid[s / cols][s % cols] = CellCode::Start;
                        grid[g / cols][g % cols] = CellCode::Goal;
                        for &o in obs {
                            grid[o / cols][o % cols] = CellCode::Obstacle;
                        }
                        visit(&grid);
                    });
                }
            }
        }
    }
}

fn subsets(items: &[usize], max: usize, visit: &mut impl FnMut(&[usize])) {
    fn go(items: &[usize], from: usize, max: usize, cur: &mut Vec<usize>, visit: &mut impl FnMut(&[usize])) {
        visit(cur);
        if cur.len() == max {
            return;
        }
        for i in from..items.len() {
            cur.push(items[i]);
            go(items, i + 1, max, cur, visit);
            cur.pop();
        }
    }
    go(items, 0, max, &mut Vec::new(), visit);
}

pub fn random_maze(rng: &mut impl Rng, rows: usize, cols: usize, density: f64) -> CellGrid {
    let mut grid: CellGrid = (0..rows)
        .map(|_| {
            (0..cols)
                .map(|_| if rng.gen_bool(density) { CellCode::Obstacle } else { CellCode::Empty })
                .collect()
        })
        .collect();
    let mut cells: Vec<(usize, usize)> = (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).collect();
    cells.shuffle(rng);
    grid[cells[0].0][cells[0].1] = CellCode::Start;
    grid[cells[1].0][cells[1].1] = CellCode::Goal;
    grid
}

/// BFS-free reachability by flood fill over a work list, for NoPath checks.
pub fn reachable(m: &GridMaze) -> bool {
    let mut seen = vec![m.start];
    let mut work = VecDeque::from([m.start]);
    while let Some(c) = work.pop_back() {
        for a in Action::ORDER {
            if let Some(n) = m.step(c, a) {
                if !seen.contains(&n) {
                    seen.push(n);
                    work.push_back(n);
                }
            }
        }
    }
    seen.contains(&m.goal)
}
