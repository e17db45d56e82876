use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::{
    collect, estimate_j, AdvantageEstimator, ConstraintSignal, PolicyNet, PpoConfig, RolloutBatch, Signal, ValueNet,
};
use crate::env::Environment;
use crate::error::{Error, Result};
use crate::nn::{log_softmax, GradBuffer, Optimizer};
use crate::IclRng;

/// Log-ratios above this are clamped before exponentiation.
const MAX_LOG_RATIO: f64 = 20.0;

/// `mean_τ Σ_t G_t(c) ∇_θ log π(a_t | s_t)`, the score-function estimate of `∇J(c)`.
pub fn correction_gradient(policy: &PolicyNet, batch: &RolloutBatch) -> Result<GradBuffer> {
    if batch.is_empty() {
        return Err(Error::Empty("rollout batch"));
    }
    let mut grads = GradBuffer::zeros_like(&policy.net);
    let scale = 1.0 / batch.len() as f64;
    let mut upstream = vec![0.0; policy.num_actions()];
    for (i, r) in batch.rollouts.iter().enumerate() {
        let g = batch.constraint_returns(i);
        for (t, obs) in r.observations.iter().enumerate() {
            if g[t] == 0.0 {
                continue;
            }
            let (logits, tape) = policy.net.forward(obs)?;
            let lp = log_softmax(&logits);
            let a = r.trajectory.steps[t].action;
            for (k, u) in upstream.iter_mut().enumerate() {
                *u = g[t] * (f64::from(k == a) - lp[k].exp());
            }
            policy.net.backward_accumulate(&tape, &upstream, scale, &mut grads)?;
        }
    }
    Ok(grads)
}

/// One descent step on `J(c)` when the batch estimate exceeds `β`. The step
/// follows the score-function gradient summed over the batch's episodes,
/// `Σ_τ Σ_t G_t(c) ∇_θ log π(a_t | s_t)`. Returns whether the policy changed.
pub fn correction_step(policy: &mut PolicyNet, batch: &RolloutBatch, beta: f64, opt: &mut Optimizer) -> Result<bool> {
    let j = estimate_j(batch, Signal::Constraint)?;
    if j <= beta {
        return Ok(false);
    }
    let mut grads = correction_gradient(policy, batch)?;
    grads.scale(batch.len() as f64);
    opt.step(&mut policy.net, &grads)?;
    Ok(true)
}

/// Optimizer state carried across PPO epochs.
#[derive(Clone, Debug)]
pub struct PpoOptimizers {
    pub policy: Optimizer,
    pub value: Optimizer,
    pub correction: Optimizer,
}

impl PpoOptimizers {
    pub fn new(cfg: &PpoConfig) -> Result<Self> {
        Ok(PpoOptimizers {
            policy: Optimizer::adam(cfg.policy_lr)?,
            value: Optimizer::adam(cfg.policy_lr)?,
            correction: Optimizer::new(cfg.correction_optimizer, cfg.correction_lr)?,
        })
    }
}

/// Diagnostics of one [`ppo_update`] call.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PpoStats {
    pub surrogate: f64,
    pub entropy: f64,
    pub value_loss: f64,
    pub clamped_ratios: usize,
}

struct Sample {
    obs: Vec<f64>,
    action: usize,
    old_log_prob: f64,
    advantage: f64,
    target: f64,
}

fn flatten(batch: &RolloutBatch, value: &ValueNet, estimator: AdvantageEstimator) -> Result<Vec<Sample>> {
    let mut samples = Vec::with_capacity(batch.num_steps());
    for (i, r) in batch.rollouts.iter().enumerate() {
        let returns = batch.reward_returns(i);
        let values: Vec<f64> = r.observations.iter().map(|o| value.value(o)).collect::<Result<_>>()?;
        let adv: Vec<f64> = match estimator {
            AdvantageEstimator::MonteCarlo => returns.iter().zip(&values).map(|(g, v)| g - v).collect(),
            AdvantageEstimator::Gae { lambda } => {
                let rewards = r.rewards();
                let n = rewards.len();
                let mut out = vec![0.0; n];
                let mut acc = 0.0;
                for t in (0..n).rev() {
                    let next_v = if t + 1 < n { values[t + 1] } else { 0.0 };
                    let delta = rewards[t] + batch.gamma * next_v - values[t];
                    acc = delta + batch.gamma * lambda * acc;
                    out[t] = acc;
                }
                out
            }
        };
        for t in 0..r.len() {
            samples.push(Sample {
                obs: r.observations[t].clone(),
                action: r.trajectory.steps[t].action,
                old_log_prob: r.log_probs[t],
                advantage: adv[t],
                target: returns[t],
            });
        }
    }
    let n = samples.len() as f64;
    let mean = samples.iter().map(|s| s.advantage).sum::<f64>() / n;
    let var = samples.iter().map(|s| (s.advantage - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for s in &mut samples {
        s.advantage = if std > 1e-8 { (s.advantage - mean) / std } else { s.advantage - mean };
    }
    Ok(samples)
}

/// `updates_per_epoch` minibatch steps on the clipped surrogate with entropy
/// bonus, plus value regression on the discounted returns.
pub fn ppo_update(
    policy: &mut PolicyNet,
    value: &mut ValueNet,
    batch: &RolloutBatch,
    cfg: &PpoConfig,
    opts: &mut PpoOptimizers,
    rng: &mut IclRng,
) -> Result<PpoStats> {
    if batch.is_empty() || batch.num_steps() == 0 {
        return Err(Error::Empty("rollout batch"));
    }
    let samples = flatten(batch, value, cfg.advantage)?;
    let mb = cfg.minibatch.min(samples.len());
    let mut stats = PpoStats::default();
    let na = policy.num_actions();
    let mut pg = GradBuffer::zeros_like(&policy.net);
    let mut vg = GradBuffer::zeros_like(&value.net);
    let mut upstream = vec![0.0; na];
    for _ in 0..cfg.updates_per_epoch {
        pg.zero();
        vg.zero();
        let scale = 1.0 / mb as f64;
        let (mut surr, mut ent, mut vloss) = (0.0, 0.0, 0.0);
        for idx in sample(rng, samples.len(), mb) {
            let s = &samples[idx];
            let (logits, tape) = policy.net.forward(&s.obs)?;
            let lp = log_softmax(&logits);
            let p: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
            let h = -p.iter().zip(&lp).map(|(pi, li)| pi * li).sum::<f64>();
            let mut log_ratio = lp[s.action] - s.old_log_prob;
            if log_ratio > MAX_LOG_RATIO {
                log_ratio = MAX_LOG_RATIO;
                stats.clamped_ratios += 1;
            }
            let ratio = log_ratio.exp();
            let clipped = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip);
            let unclipped_term = ratio * s.advantage;
            let clipped_term = clipped * s.advantage;
            // loss = -min(...) - λ_ent·H; d(-rA)/dlogits = -rA(onehot - p)
            let coef = if unclipped_term <= clipped_term { -unclipped_term } else { 0.0 };
            for k in 0..na {
                let dlogp = f64::from(k == s.action) - p[k];
                let dent = cfg.entropy_coef * p[k] * (lp[k] + h);
                upstream[k] = coef * dlogp + dent;
            }
            policy.net.backward_accumulate(&tape, &upstream, scale, &mut pg)?;
            surr += unclipped_term.min(clipped_term);
            ent += h;

            let (v, vtape) = value.net.forward(&s.obs)?;
            let err = v[0] - s.target;
            vloss += err * err;
            value
                .net
                .backward_accumulate(&vtape, &[2.0 * cfg.value_coef * err], scale, &mut vg)?;
        }
        opts.policy.step(&mut policy.net, &pg)?;
        opts.value.step(&mut value.net, &vg)?;
        stats.surrogate = surr * scale;
        stats.entropy = ent * scale;
        stats.value_loss = vloss * scale;
    }
    if stats.clamped_ratios > 0 {
        log::warn!("{} probability ratios clamped at e^{MAX_LOG_RATIO}", stats.clamped_ratios);
    }
    Ok(stats)
}

/// Per-epoch training diagnostics. Reward and violation figures describe the
/// first batch of the epoch, before any correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_reward: f64,
    pub mean_violations: f64,
    pub j_constraint: f64,
    pub correction_steps: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingLog {
    pub const SCHEMA: &'static str = "icl-training-log/1";

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = crate::io::create_csv(path, Self::SCHEMA)?;
        for r in &self.epochs {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = crate::io::open_csv(path, Self::SCHEMA)?;
        let epochs = r.deserialize().collect::<std::result::Result<_, _>>()?;
        Ok(TrainingLog { epochs })
    }
}

/// Fresh policy, then `cfg.epochs` epochs of collect, correct, PPO update.
pub fn train_constrained(
    env: &dyn Environment,
    constraint: &dyn ConstraintSignal,
    cfg: &PpoConfig,
    rng: &mut IclRng,
) -> Result<(PolicyNet, TrainingLog)> {
    cfg.validate()?;
    let mut policy = PolicyNet::for_env(env, &cfg.hidden, rng)?;
    let obs_dim = policy.net.input_dim();
    let mut value = ValueNet::new(obs_dim, &cfg.hidden, rng)?;
    let mut opts = PpoOptimizers::new(cfg)?;
    let mut log = TrainingLog::default();
    for epoch in 0..cfg.epochs {
        let mut batch = collect(&policy, env, cfg.episodes_per_epoch, constraint, cfg.gamma, rng)?;
        let mut record = EpochRecord {
            epoch,
            mean_reward: batch.mean_total_reward(),
            mean_violations: batch.mean_true_violations(),
            j_constraint: estimate_j(&batch, Signal::Constraint)?,
            correction_steps: 0,
        };
        while record.correction_steps < cfg.max_corrections
            && correction_step(&mut policy, &batch, cfg.beta, &mut opts.correction)?
        {
            record.correction_steps += 1;
            batch = collect(&policy, env, cfg.episodes_per_epoch, constraint, cfg.gamma, rng)?;
        }
        ppo_update(&mut policy, &mut value, &batch, cfg, &mut opts, rng)?;
        log::debug!(
            "epoch {epoch}: reward {:.3} violations {:.3} J(c) {:.3} corrections {}",
            record.mean_reward,
            record.mean_violations,
            record.j_constraint,
            record.correction_steps
        );
        log.epochs.push(record);
    }
    Ok((policy, log))
}
