use rand::Rng;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::trajectory::State;
use crate::IclRng;

/// The eight moves. `Up` increases `y`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridAction {
    Right = 0,
    Up = 1,
    Left = 2,
    Down = 3,
    UpRight = 4,
    UpLeft = 5,
    DownLeft = 6,
    DownRight = 7,
}

impl GridAction {
    pub const ALL: [GridAction; 8] = [
        GridAction::Right,
        GridAction::Up,
        GridAction::Left,
        GridAction::Down,
        GridAction::UpRight,
        GridAction::UpLeft,
        GridAction::DownLeft,
        GridAction::DownRight,
    ];

    pub fn delta(self) -> (i64, i64) {
        match self {
            GridAction::Right => (1, 0),
            GridAction::Up => (0, 1),
            GridAction::Left => (-1, 0),
            GridAction::Down => (0, -1),
            GridAction::UpRight => (1, 1),
            GridAction::UpLeft => (-1, 1),
            GridAction::DownLeft => (-1, -1),
            GridAction::DownRight => (1, -1),
        }
    }
}

fn default_horizon() -> usize {
    50
}

fn default_gamma() -> f64 {
    1.0
}

/// Gridworld layout. `white_cells` may be omitted for data-only maps.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridworldSpec {
    pub grid_size: usize,
    pub start_cells: Vec<[i64; 2]>,
    pub goal_cell: [i64; 2],
    #[serde(default)]
    pub white_cells: Option<Vec<[i64; 2]>>,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(skip)]
    white: Vec<bool>,
}

impl GridworldSpec {
    pub(crate) fn from_json(text: &str) -> Result<Self> {
        let spec: GridworldSpec = serde_json::from_str(text)?;
        spec.validated()
    }

    pub(crate) fn validated(mut self) -> Result<Self> {
        let n = self.grid_size as i64;
        if n < 2 {
            return Err(Error::Config("grid_size must be at least 2".into()));
        }
        if self.horizon == 0 || !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config("horizon must be ≥ 1 and gamma in (0, 1]".into()));
        }
        let inside = |c: &[i64; 2]| c[0] >= 0 && c[0] < n && c[1] >= 0 && c[1] < n;
        if self.start_cells.is_empty() {
            return Err(Error::Config("no start cells".into()));
        }
        if !inside(&self.goal_cell) {
            return Err(Error::Config(format!("goal {:?} outside grid", self.goal_cell)));
        }
        for c in &self.start_cells {
            if !inside(c) {
                return Err(Error::Config(format!("start cell {c:?} outside grid")));
            }
            if *c == self.goal_cell {
                return Err(Error::Config("start cell coincides with goal".into()));
            }
        }
        self.white = vec![false; (n * n) as usize];
        if let Some(cells) = &self.white_cells {
            for c in cells {
                if !inside(c) {
                    return Err(Error::Config(format!("white cell {c:?} outside grid")));
                }
                if *c == self.goal_cell {
                    return Err(Error::Config("goal cell must have constraint value 0".into()));
                }
                self.white[(c[1] * n + c[0]) as usize] = true;
            }
        }
        Ok(self)
    }

    pub(crate) fn constraint_at(&self, x: f64, y: f64) -> Option<f64> {
        self.white_cells.as_ref()?;
        let n = self.grid_size as i64;
        let (xi, yi) = (x.round() as i64, y.round() as i64);
        if xi < 0 || yi < 0 || xi >= n || yi >= n {
            return Some(0.0);
        }
        Some(if self.white[(yi * n + xi) as usize] { 1.0 } else { 0.0 })
    }

    pub(crate) fn reset(&self, rng: &mut IclRng) -> State {
        let c = self.start_cells[rng.random_range(0..self.start_cells.len())];
        State(vec![c[0] as f64, c[1] as f64])
    }

    /// Deterministic move with per-axis clipping; +1 and termination on entering the goal.
    pub(crate) fn step(&self, state: &State, action: usize) -> Result<(State, f64, bool)> {
        if state.dim() != 2 {
            return Err(Error::dim("gridworld state", 2, state.dim()));
        }
        let n = self.grid_size as i64;
        let (dx, dy) = GridAction::ALL[action].delta();
        let x = (state.0[0].round() as i64 + dx).clamp(0, n - 1);
        let y = (state.0[1].round() as i64 + dy).clamp(0, n - 1);
        let at_goal = [x, y] == self.goal_cell;
        Ok((
            State(vec![x as f64, y as f64]),
            if at_goal { 1.0 } else { 0.0 },
            at_goal,
        ))
    }
}
