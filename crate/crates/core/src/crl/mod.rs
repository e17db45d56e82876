//! Forward constrained RL: categorical PPO with a feasibility correction step.
//!
//! Each training epoch collects a batch of episodes, applies policy-gradient
//! descent on the batch estimate of `J(c)` while it exceeds `β` (re-collecting
//! after every correction), and then runs clipped-surrogate PPO updates on
//! the final on-policy batch.

mod ppo;

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use ppo::{
    correction_gradient, correction_step, ppo_update, train_constrained, EpochRecord, PpoOptimizers, PpoStats,
    TrainingLog,
};

use crate::env::{Env, Environment};
use crate::error::{Error, Result};
use crate::nn::{log_softmax, Activation, MlpParams, OptKind};
use crate::trajectory::{Step, Trajectory};
use crate::IclRng;

/// Anything that scores constraint-input features with a value in `[0, 1]`.
pub trait ConstraintSignal {
    fn value(&self, features: &[f64]) -> Result<f64>;
}

/// `c ≡ 0`: training under it is plain PPO.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroConstraint;

impl ConstraintSignal for ZeroConstraint {
    fn value(&self, _features: &[f64]) -> Result<f64> {
        Ok(0.0)
    }
}

/// The environment's known constraint map.
#[derive(Clone, Copy, Debug)]
pub struct TrueConstraint<'a>(pub &'a Env);

impl ConstraintSignal for TrueConstraint<'_> {
    fn value(&self, features: &[f64]) -> Result<f64> {
        self.0
            .true_constraint_at(features)
            .ok_or_else(|| Error::UnsupportedMetric(format!("{} has no true constraint", self.0.id())))
    }
}

impl<F: Fn(&[f64]) -> f64> ConstraintSignal for F {
    fn value(&self, features: &[f64]) -> Result<f64> {
        Ok(self(features))
    }
}

/// How PPO advantages are formed before per-batch normalization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum AdvantageEstimator {
    /// Discounted return-to-go minus the value baseline.
    MonteCarlo,
    /// Generalized advantage estimation with the given λ.
    Gae { lambda: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub beta: f64,
    /// Training epochs `m`.
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub updates_per_epoch: usize,
    pub minibatch: usize,
    pub clip: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    /// Correction step size `η₁`.
    pub correction_lr: f64,
    pub correction_optimizer: OptKind,
    /// Upper bound on correction steps per epoch.
    pub max_corrections: usize,
    /// Policy learning rate `η₂`; the value network uses the same rate.
    pub policy_lr: f64,
    pub hidden: Vec<usize>,
    pub advantage: AdvantageEstimator,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 1.0,
            beta: 0.99,
            epochs: 500,
            episodes_per_epoch: 20,
            updates_per_epoch: 25,
            minibatch: 64,
            clip: 0.1,
            entropy_coef: 0.01,
            value_coef: 0.5,
            correction_lr: 2.5e-5,
            correction_optimizer: OptKind::Sgd,
            max_corrections: 5,
            policy_lr: 5e-4,
            hidden: vec![64, 64],
            advantage: AdvantageEstimator::MonteCarlo,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("clip", self.clip),
            ("policy_lr", self.policy_lr),
            ("value_coef", self.value_coef),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must be in (0, 1], got {}", self.gamma)));
        }
        if !(self.entropy_coef >= 0.0 && self.correction_lr >= 0.0) || !self.beta.is_finite() {
            return Err(Error::Config("entropy_coef, correction_lr must be ≥ 0 and beta finite".into()));
        }
        if self.episodes_per_epoch == 0 || self.minibatch == 0 {
            return Err(Error::Config("episodes_per_epoch and minibatch must be ≥ 1".into()));
        }
        if let AdvantageEstimator::Gae { lambda } = self.advantage {
            if !(0.0..=1.0).contains(&lambda) {
                return Err(Error::Config(format!("GAE lambda must be in [0, 1], got {lambda}")));
            }
        }
        Ok(())
    }
}

/// Categorical policy: observation → action logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyNet {
    pub net: MlpParams,
}

impl PolicyNet {
    pub fn new(obs_dim: usize, num_actions: usize, hidden: &[usize], rng: &mut IclRng) -> Result<Self> {
        let sizes = layer_sizes(obs_dim, hidden, num_actions);
        Ok(PolicyNet {
            net: MlpParams::new(&sizes, Activation::Relu, Activation::Identity, 0.01, rng)?,
        })
    }

    pub fn for_env(env: &dyn Environment, hidden: &[usize], rng: &mut IclRng) -> Result<Self> {
        let s = env.reset(&mut crate::rng_from_seed(0))?;
        Self::new(env.observation(&s).len(), env.num_actions(), hidden, rng)
    }

    pub fn num_actions(&self) -> usize {
        self.net.output_dim()
    }

    pub fn log_probs(&self, obs: &[f64]) -> Result<Vec<f64>> {
        let logits = self.net.eval(obs)?;
        let lp = log_softmax(&logits);
        if lp.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("policy log-probabilities".into()));
        }
        Ok(lp)
    }

    pub fn probs(&self, obs: &[f64]) -> Result<Vec<f64>> {
        Ok(self.log_probs(obs)?.into_iter().map(f64::exp).collect())
    }

    /// Draws an action; returns it with its log-probability.
    pub fn sample(&self, obs: &[f64], rng: &mut IclRng) -> Result<(usize, f64)> {
        let lp = self.log_probs(obs)?;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (a, l) in lp.iter().enumerate() {
            acc += l.exp();
            if u < acc {
                return Ok((a, *l));
            }
        }
        let last = lp.len() - 1;
        Ok((last, lp[last]))
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        self.net.save_json(path)
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Ok(PolicyNet {
            net: MlpParams::load_json(path)?,
        })
    }
}

/// State-value baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueNet {
    pub net: MlpParams,
}

impl ValueNet {
    pub fn new(obs_dim: usize, hidden: &[usize], rng: &mut IclRng) -> Result<Self> {
        let sizes = layer_sizes(obs_dim, hidden, 1);
        Ok(ValueNet {
            net: MlpParams::new(&sizes, Activation::Relu, Activation::Identity, 1.0, rng)?,
        })
    }

    pub fn value(&self, obs: &[f64]) -> Result<f64> {
        let v = self.net.eval(obs)?[0];
        if !v.is_finite() {
            return Err(Error::NonFinite("value estimate".into()));
        }
        Ok(v)
    }
}

fn layer_sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut sizes = Vec::with_capacity(hidden.len() + 2);
    sizes.push(input);
    sizes.extend_from_slice(hidden);
    sizes.push(output);
    sizes
}

/// One collected episode with everything PPO and the correction step need.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub trajectory: Trajectory,
    pub observations: Vec<Vec<f64>>,
    pub log_probs: Vec<f64>,
    /// `c(s_t, a_t)` under the constraint used for training.
    pub costs: Vec<f64>,
    /// True constraint values when the environment has one.
    pub true_costs: Vec<Option<f64>>,
    /// Whether the episode ended by a terminal condition (not the horizon).
    pub terminated: bool,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.costs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.costs.is_empty()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.trajectory.steps.iter().map(|s| s.reward).collect()
    }
}

/// Which per-step quantity a J estimate sums.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Signal {
    Reward,
    Constraint,
}

#[derive(Clone, Debug)]
pub struct RolloutBatch {
    pub rollouts: Vec<Rollout>,
    pub gamma: f64,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.rollouts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rollouts.is_empty()
    }

    pub fn num_steps(&self) -> usize {
        self.rollouts.iter().map(Rollout::len).sum()
    }

    pub fn trajectories(&self) -> Vec<Trajectory> {
        self.rollouts.iter().map(|r| r.trajectory.clone()).collect()
    }

    /// `G_t(c)` for every step of rollout `i`.
    pub fn constraint_returns(&self, i: usize) -> Vec<f64> {
        discounted_returns(&self.rollouts[i].costs, self.gamma)
    }

    pub fn reward_returns(&self, i: usize) -> Vec<f64> {
        discounted_returns(&self.rollouts[i].rewards(), self.gamma)
    }

    /// Mean over episodes of the undiscounted total reward.
    pub fn mean_total_reward(&self) -> f64 {
        mean(self.rollouts.iter().map(|r| r.trajectory.total_reward()))
    }

    /// Mean over episodes of the summed true constraint values, or `NaN`
    /// when the environment has no true constraint.
    pub fn mean_true_violations(&self) -> f64 {
        let mut total = 0.0;
        for r in &self.rollouts {
            for c in &r.true_costs {
                match c {
                    Some(v) => total += v,
                    None => return f64::NAN,
                }
            }
        }
        total / self.rollouts.len() as f64
    }

    /// Discounted J of the true constraint (`NaN` if unknown).
    pub fn true_constraint_j(&self) -> f64 {
        let mut total = 0.0;
        for r in &self.rollouts {
            let mut disc = 1.0;
            for c in &r.true_costs {
                match c {
                    Some(v) => total += disc * v,
                    None => return f64::NAN,
                }
                disc *= self.gamma;
            }
        }
        total / self.rollouts.len() as f64
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    s / n as f64
}

/// `G_t = x_t + γ·G_{t+1}` with `G` past the end equal to 0.
pub fn discounted_returns(values: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    let mut acc = 0.0;
    for t in (0..values.len()).rev() {
        acc = values[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// `Σ_t γ^t x_t` with `t` counted from 0.
pub fn discounted_sum(values: &[f64], gamma: f64) -> f64 {
    let mut disc = 1.0;
    let mut total = 0.0;
    for v in values {
        total += disc * v;
        disc *= gamma;
    }
    total
}

/// Roll out `n_episodes` on-policy episodes, recording log-probabilities and
/// constraint values.
pub fn collect(
    policy: &PolicyNet,
    env: &dyn Environment,
    n_episodes: usize,
    constraint: &dyn ConstraintSignal,
    gamma: f64,
    rng: &mut IclRng,
) -> Result<RolloutBatch> {
    if n_episodes == 0 {
        return Err(Error::Config("need at least one episode".into()));
    }
    let mut rollouts = Vec::with_capacity(n_episodes);
    for _ in 0..n_episodes {
        rollouts.push(rollout(policy, env, constraint, rng)?);
    }
    Ok(RolloutBatch { rollouts, gamma })
}

fn rollout(
    policy: &PolicyNet,
    env: &dyn Environment,
    constraint: &dyn ConstraintSignal,
    rng: &mut IclRng,
) -> Result<Rollout> {
    let horizon = env.horizon();
    let mut state = env.reset(rng)?;
    let mut r = Rollout {
        trajectory: Trajectory::new(),
        observations: Vec::new(),
        log_probs: Vec::new(),
        costs: Vec::new(),
        true_costs: Vec::new(),
        terminated: false,
    };
    for t in 0..horizon {
        let obs = env.observation(&state);
        let (action, lp) = policy.sample(&obs, rng)?;
        let tr = env.step(&state, action, t, rng)?;
        let cost = constraint.value(&env.constraint_features(&state, action))?;
        r.observations.push(obs);
        r.log_probs.push(lp);
        r.costs.push(cost);
        r.true_costs.push(tr.true_constraint_value);
        r.trajectory.steps.push(Step {
            state,
            action,
            reward: tr.reward,
            done: tr.done,
        });
        if tr.done {
            r.terminated = tr.terminated;
            break;
        }
        state = tr.next_state;
    }
    Ok(r)
}

/// Monte Carlo mean over episodes of `Σ_t γ^t · signal_t`.
pub fn estimate_j(batch: &RolloutBatch, signal: Signal) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("rollout batch"));
    }
    let total: f64 = batch
        .rollouts
        .iter()
        .map(|r| match signal {
            Signal::Reward => discounted_sum(&r.rewards(), batch.gamma),
            Signal::Constraint => discounted_sum(&r.costs, batch.gamma),
        })
        .sum();
    Ok(total / batch.len() as f64)
}
