//! Constraint-function adjustment against a reweighted policy mixture.
//!
//! Agent data `D_A` is sampled from the policy mixture with probabilities
//! proportional to the policy weights, and each trajectory carries a
//! dissimilarity weight `w(τ)`. The constraint network is then trained to
//! minimize the soft loss
//!
//! ```text
//! L(c) = -Σ_τ w(τ) c^γ(τ) / Σ_τ w(τ) + λ · max(0, mean_{τ∈D_E} c^γ(τ) - β)
//! ```
//!
//! where `c^γ(τ) = Σ_t γ^t c(s_t, a_t)`.

use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::crl::{collect, ConstraintSignal, PolicyNet, ZeroConstraint};
use crate::env::{Env, Environment};
use crate::error::{Error, Result};
use crate::nn::{Activation, GradBuffer, MlpParams, Optimizer, Tape};
use crate::trajectory::Trajectory;
use crate::IclRng;

/// Sigmoid-headed MLP over constraint-input features, with a fixed affine
/// input map `(f - shift) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstraintFn {
    pub net: MlpParams,
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl ConstraintFn {
    pub fn new(shift: Vec<f64>, scale: Vec<f64>, hidden: &[usize], rng: &mut IclRng) -> Result<Self> {
        if shift.len() != scale.len() {
            return Err(Error::dim("constraint input scaling", shift.len(), scale.len()));
        }
        if scale.iter().any(|s| *s == 0.0 || !s.is_finite()) {
            return Err(Error::Config("constraint input scale must be finite and non-zero".into()));
        }
        let mut sizes = vec![shift.len()];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Ok(ConstraintFn {
            net: MlpParams::new(&sizes, Activation::Relu, Activation::Sigmoid, 1.0, rng)?,
            shift,
            scale,
        })
    }

    pub fn for_env(env: &Env, hidden: &[usize], rng: &mut IclRng) -> Result<Self> {
        let (shift, scale) = env.constraint_input_scaling();
        Self::new(shift, scale, hidden, rng)
    }

    fn input(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.shift.len() {
            return Err(Error::dim("constraint features", self.shift.len(), features.len()));
        }
        Ok(features
            .iter()
            .zip(self.shift.iter().zip(&self.scale))
            .map(|(f, (m, s))| (f - m) / s)
            .collect())
    }

    pub fn eval(&self, features: &[f64]) -> Result<f64> {
        Ok(self.net.eval(&self.input(features)?)?[0])
    }

    fn forward(&self, features: &[f64]) -> Result<(f64, Tape)> {
        let (out, tape) = self.net.forward(&self.input(features)?)?;
        Ok((out[0], tape))
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let c: ConstraintFn = serde_json::from_str(&text)?;
        c.net.validate()?;
        Ok(c)
    }
}

impl ConstraintSignal for ConstraintFn {
    fn value(&self, features: &[f64]) -> Result<f64> {
        self.eval(features)
    }
}

/// Frozen policies with unnormalized mixture weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicySet {
    pub policies: Vec<PolicyNet>,
    pub weights: Vec<f64>,
}

impl PolicySet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, policy: PolicyNet, weight: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&weight) {
            return Err(Error::Config(format!("policy weight {weight} outside [0, 1]")));
        }
        self.policies.push(policy);
        self.weights.push(weight);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.policies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.policies.is_empty()
    }

    /// Selection probabilities `∝ w̃_i`; uniform when every weight is zero.
    pub fn probabilities(&self) -> Vec<f64> {
        let total: f64 = self.weights.iter().sum();
        if total > 0.0 {
            self.weights.iter().map(|w| w / total).collect()
        } else {
            log::warn!("all policy weights are zero; sampling policies uniformly");
            vec![1.0 / self.len() as f64; self.len()]
        }
    }
}

/// Draws `n` policy indices with probability `∝ w̃_i`.
pub fn draw_policies(set: &PolicySet, n: usize, rng: &mut IclRng) -> Result<Vec<usize>> {
    if set.is_empty() {
        return Err(Error::Empty("policy set"));
    }
    let probs = set.probabilities();
    Ok((0..n)
        .map(|_| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return i;
                }
            }
            probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
        })
        .collect())
}

/// `n_traj` trajectories from the policy mixture, each preceded by a fresh policy draw.
pub fn sample_mixture(set: &PolicySet, env: &dyn Environment, n_traj: usize, rng: &mut IclRng) -> Result<Vec<Trajectory>> {
    let picks = draw_policies(set, n_traj, rng)?;
    let mut out = Vec::with_capacity(n_traj);
    for i in picks {
        let batch = collect(&set.policies[i], env, 1, &ZeroConstraint, 1.0, rng)?;
        out.push(batch.rollouts.into_iter().next().unwrap().trajectory);
    }
    Ok(out)
}

/// `Σ_t γ^t c(s_t, a_t)` for a trajectory given as per-step features.
pub fn cgamma(features: &[Vec<f64>], c: &dyn ConstraintSignal, gamma: f64) -> Result<f64> {
    if features.is_empty() {
        return Err(Error::Empty("trajectory"));
    }
    let mut disc = 1.0;
    let mut total = 0.0;
    for f in features {
        total += disc * c.value(f)?;
        disc *= gamma;
    }
    Ok(total)
}

/// Mean of `c^γ` over a dataset of per-step features.
pub fn dataset_j(data: &[Vec<Vec<f64>>], c: &dyn ConstraintSignal, gamma: f64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let mut total = 0.0;
    for f in data {
        total += cgamma(f, c, gamma)?;
    }
    Ok(total / data.len() as f64)
}

/// `Σ_τ w(τ) c^γ(τ) / Σ_τ w(τ)`.
pub fn mixture_objective(data: &[Vec<Vec<f64>>], weights: &[f64], c: &dyn ConstraintSignal, gamma: f64) -> Result<f64> {
    if data.len() != weights.len() {
        return Err(Error::dim("trajectory weights", data.len(), weights.len()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::DegenerateMixture);
    }
    let mut acc = 0.0;
    for (f, w) in data.iter().zip(weights) {
        if *w != 0.0 {
            acc += w * cgamma(f, c, gamma)?;
        }
    }
    Ok(acc / total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdjustConfig {
    pub lambda: f64,
    pub beta: f64,
    /// Passes over the agent data.
    pub epochs: usize,
    pub lr: f64,
    pub gamma: f64,
    pub minibatch: usize,
}

impl Default for AdjustConfig {
    fn default() -> Self {
        AdjustConfig {
            lambda: 15.0,
            beta: 0.99,
            epochs: 20,
            lr: 5e-4,
            gamma: 1.0,
            minibatch: 64,
        }
    }
}

impl AdjustConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.lr >= 0.0) || !self.beta.is_finite() {
            return Err(Error::Config("lambda and lr must be ≥ 0, beta finite".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) || self.minibatch == 0 {
            return Err(Error::Config("gamma must be in (0, 1] and minibatch ≥ 1".into()));
        }
        Ok(())
    }
}

/// `-J_mix(c) + λ · ReLU(J_E(c) - β)`.
pub fn soft_loss(
    c: &dyn ConstraintSignal,
    agent: &[Vec<Vec<f64>>],
    weights: &[f64],
    expert: &[Vec<Vec<f64>>],
    cfg: &AdjustConfig,
) -> Result<f64> {
    let j_mix = mixture_objective(agent, weights, c, cfg.gamma)?;
    let j_e = dataset_j(expert, c, cfg.gamma)?;
    Ok(-j_mix + cfg.lambda * (j_e - cfg.beta).max(0.0))
}

/// A state-action pair with its coefficient in a linear functional of `c`.
#[derive(Clone, Debug)]
struct WeightedPoint<'a> {
    features: &'a [f64],
    coef: f64,
}

/// Agent pairs with `w(τ)γ^t/Σw`; expert pairs with `γ^t/|D_E|`.
fn weighted_points<'a>(data: &'a [Vec<Vec<f64>>], weights: Option<&[f64]>, gamma: f64) -> Vec<WeightedPoint<'a>> {
    let total = weights.map_or(data.len() as f64, |w| w.iter().sum());
    let mut out = Vec::new();
    for (i, traj) in data.iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        if w == 0.0 {
            continue;
        }
        let mut disc = 1.0;
        for f in traj {
            out.push(WeightedPoint {
                features: f,
                coef: w * disc / total,
            });
            disc *= gamma;
        }
    }
    out
}

fn accumulate(c: &ConstraintFn, points: &[&WeightedPoint], sign_scale: f64, grads: &mut GradBuffer) -> Result<()> {
    for p in points {
        let (_, tape) = c.forward(p.features)?;
        c.net.backward_accumulate(&tape, &[p.coef], sign_scale, grads)?;
    }
    Ok(())
}

/// Exact full-batch gradient of the soft loss.
pub fn soft_loss_gradient(
    c: &ConstraintFn,
    agent: &[Vec<Vec<f64>>],
    weights: &[f64],
    expert: &[Vec<Vec<f64>>],
    cfg: &AdjustConfig,
) -> Result<(f64, GradBuffer)> {
    let loss = soft_loss(c, agent, weights, expert, cfg)?;
    let mut grads = GradBuffer::zeros_like(&c.net);
    let a = weighted_points(agent, Some(weights), cfg.gamma);
    accumulate(c, &a.iter().collect::<Vec<_>>(), -1.0, &mut grads)?;
    if dataset_j(expert, c, cfg.gamma)? > cfg.beta {
        let e = weighted_points(expert, None, cfg.gamma);
        accumulate(c, &e.iter().collect::<Vec<_>>(), cfg.lambda, &mut grads)?;
    }
    Ok((loss, grads))
}

/// Summary of one [`adjust`] call.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdjustStats {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub j_mix: f64,
    pub j_expert: f64,
    pub steps: usize,
}

/// Adam descent on the soft loss. Each epoch is one shuffled pass over the
/// agent state-action pairs in minibatches; the expert term uses a random
/// expert minibatch of the same size and is active whenever the full-data
/// `J_E(c)` exceeds `β`.
pub fn adjust(
    c: &mut ConstraintFn,
    agent: &[Vec<Vec<f64>>],
    weights: &[f64],
    expert: &[Vec<Vec<f64>>],
    cfg: &AdjustConfig,
    rng: &mut IclRng,
) -> Result<AdjustStats> {
    cfg.validate()?;
    let initial_loss = soft_loss(c, agent, weights, expert, cfg)?;
    if !initial_loss.is_finite() {
        return Err(Error::NonFinite("soft loss before adjustment".into()));
    }
    let a_points = weighted_points(agent, Some(weights), cfg.gamma);
    let e_points = weighted_points(expert, None, cfg.gamma);
    let mut opt = Optimizer::adam(cfg.lr)?;
    let mut grads = GradBuffer::zeros_like(&c.net);
    let mut order: Vec<usize> = (0..a_points.len()).collect();
    let mut steps = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.minibatch) {
            grads.zero();
            let mb: Vec<&WeightedPoint> = chunk.iter().map(|&i| &a_points[i]).collect();
            accumulate(c, &mb, -(a_points.len() as f64) / mb.len() as f64, &mut grads)?;
            let j_e = dataset_j(expert, c, cfg.gamma)?;
            if !j_e.is_finite() {
                return Err(Error::NonFinite(format!("expert constraint value in epoch {epoch}")));
            }
            if j_e > cfg.beta && cfg.lambda > 0.0 {
                let k = cfg.minibatch.min(e_points.len());
                let emb: Vec<&WeightedPoint> = sample(rng, e_points.len(), k).into_iter().map(|i| &e_points[i]).collect();
                accumulate(c, &emb, cfg.lambda * e_points.len() as f64 / k as f64, &mut grads)?;
            }
            opt.step(&mut c.net, &grads)?;
            steps += 1;
        }
    }
    let final_loss = soft_loss(c, agent, weights, expert, cfg)?;
    if !final_loss.is_finite() {
        return Err(Error::NonFinite("soft loss after adjustment".into()));
    }
    Ok(AdjustStats {
        initial_loss,
        final_loss,
        j_mix: mixture_objective(agent, weights, c, cfg.gamma)?,
        j_expert: dataset_j(expert, c, cfg.gamma)?,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng_from_seed;

    fn constant(v: f64) -> impl Fn(&[f64]) -> f64 {
        move |_| v
    }

    fn traj(n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|i| vec![i as f64, 0.0]).collect()
    }

    #[test]
    fn cgamma_cases() {
        assert_eq!(cgamma(&traj(4), &constant(0.0), 0.9).unwrap(), 0.0);
        assert_eq!(cgamma(&traj(3), &constant(1.0), 0.5).unwrap(), 1.75);
        assert_eq!(cgamma(&traj(50), &constant(1.0), 1.0).unwrap(), 50.0);
    }

    #[test]
    fn mixture_objective_cases() {
        let c = |f: &[f64]| if f[1] > 0.0 { 1.0 } else { 0.0 };
        let hot = |n: usize| -> Vec<Vec<f64>> { (0..n).map(|_| vec![0.0, 1.0]).collect() };
        let data = vec![hot(3), hot(6)];
        assert_eq!(mixture_objective(&data, &[1.0, 1.0], &c, 1.0).unwrap(), 4.5);
        assert_eq!(mixture_objective(&data, &[1.0, 0.0], &c, 1.0).unwrap(), 3.0);
        assert_eq!(mixture_objective(&data, &[2.0, 1.0], &c, 1.0).unwrap(), 4.0);
        assert!(matches!(
            mixture_objective(&data, &[0.0, 0.0], &c, 1.0),
            Err(Error::DegenerateMixture)
        ));
    }

    #[test]
    fn soft_loss_cases() {
        let cfg = AdjustConfig {
            beta: 1.0,
            lambda: 15.0,
            ..AdjustConfig::default()
        };
        // J_mix = 2 (two steps of c=1), J_E = 1.1
        let agent = vec![traj(2)];
        let c = |f: &[f64]| if f[1] > 0.5 { 0.55 } else { 1.0 };
        let expert = vec![vec![vec![0.0, 1.0], vec![1.0, 1.0]]];
        let loss = soft_loss(&c, &agent, &[1.0], &expert, &cfg).unwrap();
        assert!((loss - (-2.0 + 1.5)).abs() < 1e-12);
        let feasible = AdjustConfig { beta: 5.0, ..cfg.clone() };
        assert_eq!(soft_loss(&c, &agent, &[1.0], &expert, &feasible).unwrap(), -2.0);
        assert_eq!(soft_loss(&constant(0.0), &agent, &[1.0], &expert, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn uniform_fallback_for_zero_policy_weights() {
        let mut rng = rng_from_seed(0);
        let mut set = PolicySet::new();
        for _ in 0..2 {
            set.push(PolicyNet::new(2, 8, &[4], &mut rng).unwrap(), 0.0).unwrap();
        }
        assert_eq!(set.probabilities(), vec![0.5, 0.5]);
    }

    #[test]
    fn zero_weight_policy_never_drawn() {
        let mut rng = rng_from_seed(0);
        let mut set = PolicySet::new();
        set.push(PolicyNet::new(2, 8, &[4], &mut rng).unwrap(), 0.0).unwrap();
        set.push(PolicyNet::new(2, 8, &[4], &mut rng).unwrap(), 1.0).unwrap();
        assert!(draw_policies(&set, 1000, &mut rng).unwrap().iter().all(|i| *i == 1));
        let mut single = PolicySet::new();
        single.push(set.policies[0].clone(), 0.3).unwrap();
        assert!(draw_policies(&single, 100, &mut rng).unwrap().iter().all(|i| *i == 0));
    }

    #[test]
    fn zero_epochs_is_identity() {
        let mut rng = rng_from_seed(1);
        let mut c = ConstraintFn::new(vec![0.0, 0.0], vec![1.0, 1.0], &[8], &mut rng).unwrap();
        let before = c.clone();
        let cfg = AdjustConfig {
            epochs: 0,
            ..AdjustConfig::default()
        };
        adjust(&mut c, &[traj(3)], &[1.0], &[traj(2)], &cfg, &mut rng).unwrap();
        assert_eq!(c, before);
    }

    #[test]
    fn constraint_output_in_unit_interval() {
        let mut rng = rng_from_seed(2);
        let c = ConstraintFn::new(vec![0.0, 0.0], vec![1.0, 1.0], &[64, 64], &mut rng).unwrap();
        for i in 0..50 {
            let v = c.eval(&[i as f64 - 25.0, (i % 7) as f64]).unwrap();
            assert!(v > 0.0 && v < 1.0);
        }
    }
}
