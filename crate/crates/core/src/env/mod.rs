//! Seedable environments with known constraint maps.
//!
//! Two families are provided: a 7×7 gridworld with eight moves and a cartpole
//! whose constraint depends on cart position and action. Constraint maps are
//! data (JSON) so other layouts can be loaded without rebuilding; the built-in
//! ids embed the shipped defaults.

mod cartpole;
mod gridworld;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use cartpole::{CartPoleSpec, Interval, CARTPOLE_X_LIMIT};
pub use gridworld::{GridAction, GridworldSpec};

use crate::error::{Error, Result};
use crate::trajectory::{State, Trajectory};
use crate::IclRng;

const GRIDWORLD_A: &str = include_str!("../../data/gridworld_a.json");
const GRIDWORLD_B: &str = include_str!("../../data/gridworld_b.json");
const CARTPOLE_MR: &str = include_str!("../../data/cartpole_mr.json");
const CARTPOLE_MID: &str = include_str!("../../data/cartpole_mid.json");

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum EnvId {
    GridworldA,
    GridworldB,
    CartPoleMR,
    CartPoleMid,
    /// A gridworld or cartpole spec file.
    Custom(PathBuf),
}

impl EnvId {
    pub const BUILTIN: [EnvId; 4] = [
        EnvId::GridworldA,
        EnvId::GridworldB,
        EnvId::CartPoleMR,
        EnvId::CartPoleMid,
    ];

    pub fn name(&self) -> String {
        match self {
            EnvId::GridworldA => "gridworld-a".into(),
            EnvId::GridworldB => "gridworld-b".into(),
            EnvId::CartPoleMR => "cartpole-mr".into(),
            EnvId::CartPoleMid => "cartpole-mid".into(),
            EnvId::Custom(p) => p.display().to_string(),
        }
    }
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for EnvId {
    type Err = std::convert::Infallible;

    /// Known names map to the built-ins; anything else is taken as a spec path.
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "gridworld-a" | "gridworlda" | "ga" => EnvId::GridworldA,
            "gridworld-b" | "gridworldb" | "gb" => EnvId::GridworldB,
            "cartpole-mr" | "cartpolemr" | "cmr" => EnvId::CartPoleMR,
            "cartpole-mid" | "cartpolemid" | "cmid" => EnvId::CartPoleMid,
            _ => EnvId::Custom(PathBuf::from(s)),
        })
    }
}

impl Serialize for EnvId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.name())
    }
}

impl<'de> Deserialize<'de> for EnvId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(s.parse().unwrap())
    }
}

/// Per-environment hyperparameter defaults.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvDefaults {
    pub gamma: f64,
    pub beta: f64,
    pub ppo_epochs: usize,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub next_state: State,
    pub reward: f64,
    /// Episode over: terminal condition or horizon reached.
    pub done: bool,
    /// Terminal condition only (goal entered, pole fell, cart out of bounds).
    pub terminated: bool,
    /// `None` for data-only environments without a known constraint.
    pub true_constraint_value: Option<f64>,
}

/// How accrual histograms on the grid are compared.
#[derive(Clone, Debug, PartialEq)]
pub enum GridLayout {
    /// Points are 2-D bin centres; compare with the Euclidean ground cost.
    Plane,
    /// Points are `(x, action)` ordered action-major; compare each action's
    /// slice in 1-D over `positions` and sum.
    PerAction { positions: Vec<f64>, actions: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscretizationGrid {
    /// Constraint-input points; each point is also its bin centre.
    pub points: Vec<Vec<f64>>,
    pub layout: GridLayout,
}

impl DiscretizationGrid {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index of the nearest bin (first one on ties).
    pub fn nearest(&self, features: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, p) in self.points.iter().enumerate() {
            let d: f64 = p.iter().zip(features).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }
}

/// Interface shared by the built-in environments and small test MDPs.
pub trait Environment {
    fn num_actions(&self) -> usize;

    /// Maximum number of steps per episode.
    fn horizon(&self) -> usize;

    fn reset(&self, rng: &mut IclRng) -> Result<State>;

    /// Advance one step. `t` is the number of steps already taken this episode.
    fn step(&self, state: &State, action: usize, t: usize, rng: &mut IclRng) -> Result<Transition>;

    /// Policy/value network input.
    fn observation(&self, state: &State) -> Vec<f64>;

    /// Input of the constraint function and of the density model.
    fn constraint_features(&self, state: &State, action: usize) -> Vec<f64>;
}

#[derive(Clone, Debug)]
pub enum EnvKind {
    Gridworld(GridworldSpec),
    CartPole(CartPoleSpec),
}

#[derive(Clone, Debug)]
pub struct Env {
    id: EnvId,
    kind: EnvKind,
    horizon: usize,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SpecFile {
    Gridworld(GridworldSpec),
    CartPole(CartPoleSpec),
}

impl Env {
    pub fn new(id: EnvId) -> Result<Self> {
        let kind = match &id {
            EnvId::GridworldA => EnvKind::Gridworld(GridworldSpec::from_json(GRIDWORLD_A)?),
            EnvId::GridworldB => EnvKind::Gridworld(GridworldSpec::from_json(GRIDWORLD_B)?),
            EnvId::CartPoleMR => EnvKind::CartPole(CartPoleSpec::from_json(CARTPOLE_MR)?),
            EnvId::CartPoleMid => EnvKind::CartPole(CartPoleSpec::from_json(CARTPOLE_MID)?),
            EnvId::Custom(path) => load_spec(path)?,
        };
        let horizon = match &kind {
            EnvKind::Gridworld(g) => g.horizon,
            EnvKind::CartPole(c) => c.horizon,
        };
        Ok(Env { id, kind, horizon })
    }

    pub fn id(&self) -> &EnvId {
        &self.id
    }

    pub fn kind(&self) -> &EnvKind {
        &self.kind
    }

    pub fn defaults(&self) -> EnvDefaults {
        match &self.kind {
            EnvKind::Gridworld(g) => EnvDefaults {
                gamma: g.gamma,
                beta: 0.99,
                ppo_epochs: 500,
                iterations: 10,
            },
            EnvKind::CartPole(c) => EnvDefaults {
                gamma: c.gamma,
                beta: if self.id == EnvId::CartPoleMR { 50.0 } else { 30.0 },
                ppo_epochs: 300,
                iterations: 10,
            },
        }
    }

    pub fn gamma(&self) -> f64 {
        self.defaults().gamma
    }

    pub fn has_true_constraint(&self) -> bool {
        match &self.kind {
            EnvKind::Gridworld(g) => g.white_cells.is_some(),
            EnvKind::CartPole(c) => c.white_intervals_per_action.is_some(),
        }
    }

    /// True constraint value at a constraint-input point, `None` when the map is unknown.
    pub fn true_constraint_at(&self, features: &[f64]) -> Option<f64> {
        match &self.kind {
            EnvKind::Gridworld(g) => g.constraint_at(features[0], features[1]),
            EnvKind::CartPole(c) => c.constraint_at(features[0], features[1].round() as usize),
        }
    }

    pub fn true_constraint(&self, state: &State, action: usize) -> Option<f64> {
        self.true_constraint_at(&self.constraint_features(state, action))
    }

    pub fn discretization_grid(&self) -> DiscretizationGrid {
        match &self.kind {
            EnvKind::Gridworld(g) => {
                let n = g.grid_size as i64;
                let mut points = Vec::with_capacity((n * n) as usize);
                for y in 0..n {
                    for x in 0..n {
                        points.push(vec![x as f64, y as f64]);
                    }
                }
                DiscretizationGrid {
                    points,
                    layout: GridLayout::Plane,
                }
            }
            EnvKind::CartPole(_) => {
                // -2.4, -2.3, ..., 2.4 built from integers to avoid drift.
                let positions: Vec<f64> = (-24..=24).map(|k| k as f64 / 10.0).collect();
                let mut points = Vec::with_capacity(positions.len() * 2);
                for a in 0..2 {
                    for &x in &positions {
                        points.push(vec![x, a as f64]);
                    }
                }
                DiscretizationGrid {
                    points,
                    layout: GridLayout::PerAction {
                        positions,
                        actions: 2,
                    },
                }
            }
        }
    }

    /// Which constraint features are integer-valued (dequantized when fitting a density).
    pub fn discrete_features(&self) -> Vec<bool> {
        match &self.kind {
            EnvKind::Gridworld(_) => vec![true, true],
            EnvKind::CartPole(_) => vec![false, true],
        }
    }

    /// Fixed affine map `(f - shift) / scale` applied before the constraint network.
    pub fn constraint_input_scaling(&self) -> (Vec<f64>, Vec<f64>) {
        match &self.kind {
            EnvKind::Gridworld(g) => {
                let half = (g.grid_size as f64 - 1.0) / 2.0;
                (vec![half, half], vec![half, half])
            }
            EnvKind::CartPole(_) => (vec![0.0, 0.5], vec![CARTPOLE_X_LIMIT, 0.5]),
        }
    }

    pub fn trajectory_features(&self, traj: &Trajectory) -> Vec<Vec<f64>> {
        traj.steps
            .iter()
            .map(|s| self.constraint_features(&s.state, s.action))
            .collect()
    }

    pub fn dataset_features(&self, data: &[Trajectory]) -> Vec<Vec<Vec<f64>>> {
        data.iter().map(|t| self.trajectory_features(t)).collect()
    }

    /// Check that a dataset's states and actions fit this environment.
    pub fn validate_dataset(&self, data: &[Trajectory]) -> Result<()> {
        let dim = match &self.kind {
            EnvKind::Gridworld(_) => 2,
            EnvKind::CartPole(_) => 4,
        };
        for t in data {
            for s in &t.steps {
                if s.state.dim() != dim {
                    return Err(Error::dim("trajectory state", dim, s.state.dim()));
                }
                if s.action >= self.num_actions() {
                    return Err(Error::ActionOutOfRange {
                        action: s.action,
                        num_actions: self.num_actions(),
                    });
                }
            }
        }
        Ok(())
    }
}

fn load_spec(path: &Path) -> Result<EnvKind> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let spec: SpecFile = serde_json::from_str(&text).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        message: format!("not a gridworld or cartpole spec: {e}"),
    })?;
    let load_err = |e: Error| Error::Load {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    Ok(match spec {
        SpecFile::Gridworld(g) => EnvKind::Gridworld(g.validated().map_err(load_err)?),
        SpecFile::CartPole(c) => EnvKind::CartPole(c.validated().map_err(load_err)?),
    })
}

impl Environment for Env {
    fn num_actions(&self) -> usize {
        match &self.kind {
            EnvKind::Gridworld(_) => 8,
            EnvKind::CartPole(_) => 2,
        }
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn reset(&self, rng: &mut IclRng) -> Result<State> {
        Ok(match &self.kind {
            EnvKind::Gridworld(g) => g.reset(rng),
            EnvKind::CartPole(c) => c.reset(rng),
        })
    }

    fn step(&self, state: &State, action: usize, t: usize, _rng: &mut IclRng) -> Result<Transition> {
        if action >= self.num_actions() {
            return Err(Error::ActionOutOfRange {
                action,
                num_actions: self.num_actions(),
            });
        }
        let (next_state, reward, terminated) = match &self.kind {
            EnvKind::Gridworld(g) => g.step(state, action)?,
            EnvKind::CartPole(c) => c.step(state, action)?,
        };
        Ok(Transition {
            next_state,
            reward,
            terminated,
            done: terminated || t + 1 >= self.horizon,
            true_constraint_value: self.true_constraint(state, action),
        })
    }

    fn observation(&self, state: &State) -> Vec<f64> {
        match &self.kind {
            EnvKind::Gridworld(g) => {
                let half = (g.grid_size as f64 - 1.0) / 2.0;
                state.0.iter().map(|v| (v - half) / half).collect()
            }
            EnvKind::CartPole(_) => cartpole::observation(state),
        }
    }

    fn constraint_features(&self, state: &State, action: usize) -> Vec<f64> {
        match &self.kind {
            EnvKind::Gridworld(_) => vec![state.0[0], state.0[1]],
            EnvKind::CartPole(_) => vec![state.0[0], action as f64],
        }
    }
}
