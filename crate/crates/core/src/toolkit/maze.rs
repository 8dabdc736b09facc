//! Grid mazes: cell-code parsing and breadth-first shortest paths.
//!
//! Coordinates are `(row, col)`. `U` is `row - 1`, `D` is `row + 1`,
//! `L` is `col - 1`, `R` is `col + 1`.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub type Cell = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CellCode {
    Empty,
    Obstacle,
    Start,
    Goal,
}

impl CellCode {
    pub fn from_char(c: char) -> Option<Self> {
        match c {
            '.' => Some(CellCode::Empty),
            '#' => Some(CellCode::Obstacle),
            'S' => Some(CellCode::Start),
            'G' => Some(CellCode::Goal),
            _ => None,
        }
    }

    pub fn as_char(self) -> char {
        match self {
            CellCode::Empty => '.',
            CellCode::Obstacle => '#',
            CellCode::Start => 'S',
            CellCode::Goal => 'G',
        }
    }
}

pub type CellGrid = Vec<Vec<CellCode>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    U,
    L,
    D,
    R,
}

impl Action {
    /// BFS expansion order.
    pub const ORDER: [Action; 4] = [Action::U, Action::L, Action::D, Action::R];

    pub fn letter(self) -> char {
        match self {
            Action::U => 'U',
            Action::L => 'L',
            Action::D => 'D',
            Action::R => 'R',
        }
    }

    fn delta(self) -> (isize, isize) {
        match self {
            Action::U => (-1, 0),
            Action::L => (0, -1),
            Action::D => (1, 0),
            Action::R => (0, 1),
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

pub fn format_actions(actions: &[Action]) -> String {
    actions
        .iter()
        .map(|a| a.letter().to_string())
        .collect::<Vec<_>>()
        .join(",")
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MazeError {
    #[error("grid is empty")]
    EmptyGrid,
    #[error("grid rows have different lengths")]
    NonRectangular,
    #[error("unknown cell code {0:?}")]
    UnknownCell(String),
    #[error("more than one start cell")]
    MultipleStarts,
    #[error("no start cell")]
    MissingStart,
    #[error("more than one goal cell")]
    MultipleGoals,
    #[error("no goal cell")]
    MissingGoal,
    #[error("goal is unreachable from start")]
    NoPath,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridMaze {
    pub rows: usize,
    pub cols: usize,
    pub start: Cell,
    pub goal: Cell,
    pub obstacles: BTreeSet<Cell>,
}

impl GridMaze {
    pub fn is_free(&self, cell: Cell) -> bool {
        cell.0 < self.rows && cell.1 < self.cols && !self.obstacles.contains(&cell)
    }

    pub fn step(&self, cell: Cell, action: Action) -> Option<Cell> {
        let (dr, dc) = action.delta();
        let r = cell.0.checked_add_signed(dr)?;
        let c = cell.1.checked_add_signed(dc)?;
        self.is_free((r, c)).then_some((r, c))
    }

    pub fn to_grid(&self) -> CellGrid {
        let mut grid = vec![vec![CellCode::Empty; self.cols]; self.rows];
        for &(r, c) in &self.obstacles {
            grid[r][c] = CellCode::Obstacle;
        }
        grid[self.start.0][self.start.1] = CellCode::Start;
        grid[self.goal.0][self.goal.1] = CellCode::Goal;
        grid
    }

    /// Replays `actions` from start. `None` if any move leaves the free cells.
    pub fn replay(&self, actions: &[Action]) -> Option<Cell> {
        actions
            .iter()
            .try_fold(self.start, |cell, &a| self.step(cell, a))
    }
}

pub fn grid_rows(grid: &CellGrid) -> Vec<String> {
    grid.iter()
        .map(|row| row.iter().map(|c| c.as_char()).collect())
        .collect()
}

pub fn grid_from_rows<S: AsRef<str>>(rows: &[S]) -> Result<CellGrid, MazeError> {
    rows.iter()
        .map(|row| {
            row.as_ref()
                .chars()
                .filter(|c| !c.is_whitespace())
                .map(|c| CellCode::from_char(c).ok_or_else(|| MazeError::UnknownCell(c.to_string())))
                .collect()
        })
        .collect()
}

/// Accepts `"S.#/..G"` (rows split on `/`, `|`, `;` or newlines), `["S.#", "..G"]`
/// or `[["S", ".", "#"], ...]`.
pub fn grid_from_json(value: &Value) -> Result<CellGrid, MazeError> {
    match value {
        Value::String(s) => {
            let rows: Vec<&str> = s
                .split(['/', '|', ';', '\n'])
                .map(str::trim)
                .filter(|r| !r.is_empty())
                .collect();
            grid_from_rows(&rows)
        }
        Value::Array(rows) => rows
            .iter()
            .map(|row| match row {
                Value::String(s) => Ok(grid_from_rows(&[s.as_str()])?.pop().unwrap_or_default()),
                Value::Array(cells) => cells
                    .iter()
                    .map(|cell| {
                        let text = cell.as_str().unwrap_or_default().trim();
                        let mut chars = text.chars();
                        match (chars.next(), chars.next()) {
                            (Some(c), None) => CellCode::from_char(c)
                                .ok_or_else(|| MazeError::UnknownCell(text.to_string())),
                            _ => Err(MazeError::UnknownCell(cell.to_string())),
                        }
                    })
                    .collect(),
                other => Err(MazeError::UnknownCell(other.to_string())),
            })
            .collect(),
        other => Err(MazeError::UnknownCell(other.to_string())),
    }
}

pub fn maze_parse(grid: &CellGrid) -> Result<GridMaze, MazeError> {
    let rows = grid.len();
    if rows == 0 || grid[0].is_empty() {
        return Err(MazeError::EmptyGrid);
    }
    let cols = grid[0].len();
    if grid.iter().any(|row| row.len() != cols) {
        return Err(MazeError::NonRectangular);
    }
    let mut start = None;
    let mut goal = None;
    let mut obstacles = BTreeSet::new();
    for (r, row) in grid.iter().enumerate() {
        for (c, &code) in row.iter().enumerate() {
            match code {
                CellCode::Empty => {}
                CellCode::Obstacle => {
                    obstacles.insert((r, c));
                }
                CellCode::Start => {
                    if start.replace((r, c)).is_some() {
                        return Err(MazeError::MultipleStarts);
                    }
                }
                CellCode::Goal => {
                    if goal.replace((r, c)).is_some() {
                        return Err(MazeError::MultipleGoals);
                    }
                }
            }
        }
    }
    Ok(GridMaze {
        rows,
        cols,
        start: start.ok_or(MazeError::MissingStart)?,
        goal: goal.ok_or(MazeError::MissingGoal)?,
        obstacles,
    })
}

/// Minimal-length action sequence from start to goal. Neighbors are expanded
/// in `U, L, D, R` order, so ties resolve to the first path BFS discovers.
pub fn maze_shortest_path(maze: &GridMaze) -> Result<Vec<Action>, MazeError> {
    let idx = |(r, c): Cell| r * maze.cols + c;
    let mut parent: Vec<Option<(Cell, Action)>> = vec![None; maze.rows * maze.cols];
    let mut visited = vec![false; maze.rows * maze.cols];
    let mut queue = VecDeque::from([maze.start]);
    visited[idx(maze.start)] = true;

    while let Some(cell) = queue.pop_front() {
        if cell == maze.goal {
            let mut actions = Vec::new();
            let mut at = cell;
            while let Some((prev, action)) = parent[idx(at)] {
                actions.push(action);
                at = prev;
            }
            actions.reverse();
            return Ok(actions);
        }
        for action in Action::ORDER {
            if let Some(next) = maze.step(cell, action) {
                if !visited[idx(next)] {
                    visited[idx(next)] = true;
                    parent[idx(next)] = Some((cell, action));
                    queue.push_back(next);
                }
            }
        }
    }
    Err(MazeError::NoPath)
}
