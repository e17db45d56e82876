use rand::Rng;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::trajectory::State;
use crate::IclRng;

pub const CARTPOLE_X_LIMIT: f64 = 2.4;

const GRAVITY: f64 = 9.8;
const MASS_CART: f64 = 1.0;
const MASS_POLE: f64 = 0.1;
const TOTAL_MASS: f64 = MASS_CART + MASS_POLE;
const HALF_LENGTH: f64 = 0.5;
const POLE_MASS_LENGTH: f64 = MASS_POLE * HALF_LENGTH;
const FORCE: f64 = 10.0;
const DT: f64 = 0.02;
const THETA_LIMIT: f64 = 12.0 * 2.0 * std::f64::consts::PI / 360.0;

/// Open interval `(lo, hi)`; `null` bounds are unbounded.
#[derive(Clone, Copy, Debug, Deserialize, PartialEq)]
pub struct Interval(pub Option<f64>, pub Option<f64>);

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        self.0.is_none_or(|lo| x > lo) && self.1.is_none_or(|hi| x < hi)
    }

    fn bounded(&self) -> Option<(f64, f64)> {
        Some((self.0?, self.1?))
    }
}

fn default_horizon() -> usize {
    200
}

fn default_gamma() -> f64 {
    0.99
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CartPoleSpec {
    /// Start positions are drawn uniformly from the union of these (bounded) intervals.
    pub start_intervals: Vec<Interval>,
    /// One list of intervals per action (0 = left, 1 = right); constraint is 1 inside.
    #[serde(default)]
    pub white_intervals_per_action: Option<Vec<Vec<Interval>>>,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
}

impl CartPoleSpec {
    pub(crate) fn from_json(text: &str) -> Result<Self> {
        let spec: CartPoleSpec = serde_json::from_str(text)?;
        spec.validated()
    }

    pub(crate) fn validated(self) -> Result<Self> {
        if self.start_intervals.is_empty() {
            return Err(Error::Config("no start intervals".into()));
        }
        for iv in &self.start_intervals {
            match iv.bounded() {
                Some((lo, hi)) if lo < hi && lo >= -CARTPOLE_X_LIMIT && hi <= CARTPOLE_X_LIMIT => {}
                _ => {
                    return Err(Error::Config(format!(
                        "start interval {iv:?} must be bounded inside [-2.4, 2.4]"
                    )))
                }
            }
        }
        if let Some(w) = &self.white_intervals_per_action {
            if w.len() != 2 {
                return Err(Error::Config("need white intervals for exactly 2 actions".into()));
            }
        }
        if self.horizon == 0 || !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config("horizon must be ≥ 1 and gamma in (0, 1]".into()));
        }
        Ok(self)
    }

    pub(crate) fn constraint_at(&self, x: f64, action: usize) -> Option<f64> {
        let white = self.white_intervals_per_action.as_ref()?;
        let inside = white
            .get(action)
            .is_some_and(|ivs| ivs.iter().any(|iv| iv.contains(x)));
        Some(if inside { 1.0 } else { 0.0 })
    }

    pub(crate) fn reset(&self, rng: &mut IclRng) -> State {
        let lens: Vec<f64> = self
            .start_intervals
            .iter()
            .map(|iv| {
                let (lo, hi) = iv.bounded().unwrap();
                hi - lo
            })
            .collect();
        let mut u = rng.random::<f64>() * lens.iter().sum::<f64>();
        let mut chosen = self.start_intervals.len() - 1;
        for (i, l) in lens.iter().enumerate() {
            if u < *l {
                chosen = i;
                break;
            }
            u -= l;
        }
        let (lo, hi) = self.start_intervals[chosen].bounded().unwrap();
        let x = lo + rng.random::<f64>() * (hi - lo);
        let mut s = vec![x];
        for _ in 0..3 {
            s.push(rng.random_range(-0.05..0.05));
        }
        State(s)
    }

    /// Euler-integrated pole balance; +1 per step including the one that fails.
    pub(crate) fn step(&self, state: &State, action: usize) -> Result<(State, f64, bool)> {
        if state.dim() != 4 {
            return Err(Error::dim("cartpole state", 4, state.dim()));
        }
        let [x, x_dot, theta, theta_dot] = [state.0[0], state.0[1], state.0[2], state.0[3]];
        let force = if action == 1 { FORCE } else { -FORCE };
        let (sin, cos) = theta.sin_cos();
        let temp = (force + POLE_MASS_LENGTH * theta_dot * theta_dot * sin) / TOTAL_MASS;
        let theta_acc = (GRAVITY * sin - cos * temp)
            / (HALF_LENGTH * (4.0 / 3.0 - MASS_POLE * cos * cos / TOTAL_MASS));
        let x_acc = temp - POLE_MASS_LENGTH * theta_acc * cos / TOTAL_MASS;

        let x = x + DT * x_dot;
        let x_dot = x_dot + DT * x_acc;
        let theta = theta + DT * theta_dot;
        let theta_dot = theta_dot + DT * theta_acc;

        let fell = !(-CARTPOLE_X_LIMIT..=CARTPOLE_X_LIMIT).contains(&x)
            || !(-THETA_LIMIT..=THETA_LIMIT).contains(&theta);
        Ok((State(vec![x, x_dot, theta, theta_dot]), 1.0, fell))
    }
}

pub(crate) fn observation(state: &State) -> Vec<f64> {
    let s = &state.0;
    vec![s[0] / CARTPOLE_X_LIMIT, s[1] / 2.0, s[2] / THETA_LIMIT, s[3] / 2.0]
}
