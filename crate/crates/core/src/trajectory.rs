//! Trajectories and the line-delimited trajectory file format.
//!
//! One trajectory per line, each line a JSON array of steps:
//!
//! ```text
//! [{"state":[0.0,0.0],"action":4,"reward":0.0},{"state":[1.0,1.0],"action":4,"reward":1.0,"done":true}]
//! ```
//!
//! `done` is optional and only written on a step that ended the episode by a
//! terminal condition (goal reached, pole fell). Horizon truncation leaves it off.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Feature vector describing an environment state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct State(pub Vec<f64>);

impl State {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

impl From<Vec<f64>> for State {
    fn from(v: Vec<f64>) -> Self {
        State(v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step {
    pub state: State,
    #[serde(deserialize_with = "de_action")]
    pub action: usize,
    pub reward: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub done: bool,
}

// Discrete actions may come from other tools as `1.0`.
fn de_action<'de, D: serde::Deserializer<'de>>(de: D) -> std::result::Result<usize, D::Error> {
    let v = f64::deserialize(de)?;
    if v >= 0.0 && v.fract() == 0.0 && v < usize::MAX as f64 {
        Ok(v as usize)
    } else {
        Err(serde::de::Error::custom(format!(
            "action {v} is not a non-negative integer (continuous actions are not supported)"
        )))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Whether the episode ended through a terminal condition rather than truncation.
    pub fn terminal(&self) -> bool {
        self.steps.last().is_some_and(|s| s.done)
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

pub fn write_trajectories(path: &Path, trajectories: &[Trajectory]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for t in trajectories {
        serde_json::to_writer(&mut out, &t.steps)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_trajectories(path: &Path) -> Result<Vec<Trajectory>> {
    let file = File::open(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    parse_trajectories(BufReader::new(file))
}

/// Parse a trajectory stream. Blank lines are skipped; every trajectory must be
/// non-empty and all states must share one dimension.
pub fn parse_trajectories<R: BufRead>(reader: R) -> Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    let mut dim: Option<usize> = None;
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let steps: Vec<Step> = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if steps.is_empty() {
            return Err(Error::Parse {
                line: lineno,
                message: "empty trajectory".into(),
            });
        }
        for s in &steps {
            let d = *dim.get_or_insert(s.state.dim());
            if s.state.dim() != d {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("state dimension {} differs from {}", s.state.dim(), d),
                });
            }
        }
        out.push(Trajectory { steps });
    }
    Ok(out)
}
