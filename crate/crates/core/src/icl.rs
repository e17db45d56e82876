//! The outer alternation: constrained RL under the current constraint, then
//! constraint adjustment against the reweighted policy mixture.

use serde::{Deserialize, Serialize};

use crate::adjust::{adjust, sample_mixture, AdjustConfig, AdjustStats, ConstraintFn, PolicySet};
use crate::crl::{collect, train_constrained, PolicyNet, PpoConfig, TrainingLog, TrueConstraint, ZeroConstraint};
use crate::env::{Env, EnvId};
use crate::error::{Error, Result};
use crate::flow::{self, ExpertNllStats, FlowConfig, FlowModel};
use crate::metrics::{cmse, nad};
use crate::trajectory::Trajectory;
use crate::{rng_from_seed, IclRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IclConfig {
    pub env: EnvId,
    pub seed: u64,
    /// Outer iterations `n`.
    pub iterations: usize,
    pub beta: f64,
    pub gamma: f64,
    /// Early exit once the accrual dissimilarity is at most this; `None` runs all iterations.
    #[serde(default)]
    pub epsilon: Option<f64>,
    /// Size of every sampled dataset (`D_π`, `D_A`).
    pub dataset_size: usize,
    pub constraint_hidden: Vec<usize>,
    pub ppo: PpoConfig,
    pub adjust: AdjustConfig,
    pub flow: FlowConfig,
}

impl IclConfig {
    /// Defaults for an environment.
    pub fn for_env(env: EnvId) -> Result<Self> {
        let d = Env::new(env.clone())?.defaults();
        Ok(IclConfig {
            env,
            seed: 1,
            iterations: d.iterations,
            beta: d.beta,
            gamma: d.gamma,
            epsilon: None,
            dataset_size: 50,
            constraint_hidden: vec![64, 64],
            ppo: PpoConfig {
                gamma: d.gamma,
                beta: d.beta,
                epochs: d.ppo_epochs,
                ..PpoConfig::default()
            },
            adjust: AdjustConfig {
                gamma: d.gamma,
                beta: d.beta,
                ..AdjustConfig::default()
            },
            flow: FlowConfig::default(),
        })
    }

    /// Copy the shared `β` and `γ` into the nested stage configs.
    pub fn synced(mut self) -> Self {
        self.ppo.beta = self.beta;
        self.ppo.gamma = self.gamma;
        self.adjust.beta = self.beta;
        self.adjust.gamma = self.gamma;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset_size == 0 {
            return Err(Error::Config("dataset_size must be ≥ 1".into()));
        }
        if let Some(e) = self.epsilon {
            if e.is_nan() || e < 0.0 {
                return Err(Error::Config(format!("epsilon must be ≥ 0, got {e}")));
            }
        }
        if self.ppo.beta != self.beta || self.adjust.beta != self.beta || self.ppo.gamma != self.gamma {
            return Err(Error::Config("stage configs disagree with top-level beta/gamma".into()));
        }
        self.ppo.validate()?;
        self.adjust.validate()
    }
}

/// Which agent data the adjustment step sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Only the latest policy's data, uniform trajectory weights.
    NoMixture,
    /// All policies with equal weights, uniform trajectory weights.
    UniformMixture,
    /// Policy and trajectory reweighting.
    Full,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no-mixture" => Ok(Variant::NoMixture),
            "uniform-mixture" => Ok(Variant::UniformMixture),
            "full" => Ok(Variant::Full),
            _ => Err(Error::Config(format!(
                "unknown variant {s:?}; expected no-mixture, uniform-mixture or full"
            ))),
        }
    }
}

/// Diagnostics of one outer iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// `None` when the environment has no true constraint.
    pub cmse: Option<f64>,
    pub nad: f64,
    /// Mean dissimilarity weight of this iteration's policy.
    pub policy_weight: f64,
    /// Adjustment fell back to uniform trajectory weights.
    pub uniform_fallback: bool,
    pub adjust: AdjustStats,
    pub training: TrainingLog,
}

#[derive(Clone, Debug)]
pub struct IclResult {
    pub constraint: ConstraintFn,
    pub policy: PolicyNet,
    pub policies: PolicySet,
    pub flow: FlowModel,
    pub expert_stats: ExpertNllStats,
    pub records: Vec<IterationRecord>,
    /// Iteration at which the dissimilarity first fell to `ε`.
    pub converged_at: Option<usize>,
}

/// Hooks for persisting progress while a run is underway.
pub trait IclObserver {
    fn flow_fitted(&mut self, _flow: &FlowModel, _stats: &ExpertNllStats) -> Result<()> {
        Ok(())
    }

    /// Called after every completed iteration with the latest policy's data.
    fn iteration_done(
        &mut self,
        _record: &IterationRecord,
        _constraint: &ConstraintFn,
        _policy: &PolicyNet,
        _policy_data: &[Trajectory],
    ) -> Result<()> {
        Ok(())
    }
}

/// Observer that does nothing.
pub struct NoObserver;

impl IclObserver for NoObserver {}

/// Demonstrations from a policy trained under the environment's true constraint.
pub fn generate_expert(
    env: &Env,
    ppo: &PpoConfig,
    count: usize,
    rng: &mut IclRng,
) -> Result<(Vec<Trajectory>, PolicyNet, TrainingLog)> {
    if !env.has_true_constraint() {
        return Err(Error::Config(format!("{} has no true constraint", env.id().name())));
    }
    if count == 0 {
        return Err(Error::Empty("expert dataset"));
    }
    let (policy, log) = train_constrained(env, &TrueConstraint(env), ppo, rng)?;
    let data = collect(&policy, env, count, &ZeroConstraint, ppo.gamma, rng)?.trajectories();
    Ok((data, policy, log))
}

/// `nad(D_E, D_π) ≤ ε`.
pub fn converged(expert: &[Trajectory], policy_data: &[Trajectory], epsilon: f64, env: &Env) -> Result<bool> {
    Ok(nad(expert, policy_data, env)? <= epsilon)
}

pub fn run(cfg: &IclConfig, expert: &[Trajectory]) -> Result<IclResult> {
    run_variant(cfg, expert, Variant::Full, &mut NoObserver)
}

pub fn ablation_variant(cfg: &IclConfig, expert: &[Trajectory], variant: Variant) -> Result<IclResult> {
    run_variant(cfg, expert, variant, &mut NoObserver)
}

fn trajectory_weights(env: &Env, flow: &FlowModel, stats: &ExpertNllStats, data: &[Trajectory]) -> Result<Vec<f64>> {
    data.iter()
        .map(|t| flow::trajectory_weight(flow, stats, &env.trajectory_features(t)))
        .collect()
}

pub fn run_variant(
    cfg: &IclConfig,
    expert: &[Trajectory],
    variant: Variant,
    observer: &mut dyn IclObserver,
) -> Result<IclResult> {
    cfg.validate()?;
    if expert.is_empty() {
        return Err(Error::Empty("expert dataset"));
    }
    let env = Env::new(cfg.env.clone())?;
    env.validate_dataset(expert)?;
    let mut rng: IclRng = rng_from_seed(cfg.seed);

    let expert_features = env.dataset_features(expert);
    let points: Vec<Vec<f64>> = expert_features.iter().flatten().cloned().collect();
    let flow_model = flow::fit(&points, &env.discrete_features(), &cfg.flow, &mut rng)
        .map_err(|e| Error::staged("flow fitting", 0, e))?;
    let stats = flow::nll_stats(&flow_model, &points).map_err(|e| Error::staged("flow fitting", 0, e))?;
    observer.flow_fitted(&flow_model, &stats)?;

    let mut constraint = ConstraintFn::for_env(&env, &cfg.constraint_hidden, &mut rng)?;
    let mut policies = PolicySet::new();
    let mut records = Vec::with_capacity(cfg.iterations);
    let mut latest = None;
    let mut converged_at = None;

    for i in 0..cfg.iterations {
        let (policy, training) =
            train_constrained(&env, &constraint, &cfg.ppo, &mut rng).map_err(|e| Error::staged("constrained RL", i, e))?;
        let policy_data = collect(&policy, &env, cfg.dataset_size, &ZeroConstraint, cfg.gamma, &mut rng)?.trajectories();
        let own_weights =
            trajectory_weights(&env, &flow_model, &stats, &policy_data).map_err(|e| Error::staged("reweighting", i, e))?;
        let policy_weight = own_weights.iter().sum::<f64>() / own_weights.len() as f64;
        policies.push(policy.clone(), policy_weight)?;

        let (agent_data, mut weights) = match variant {
            Variant::Full => {
                let data = sample_mixture(&policies, &env, cfg.dataset_size, &mut rng)?;
                let w = trajectory_weights(&env, &flow_model, &stats, &data)
                    .map_err(|e| Error::staged("reweighting", i, e))?;
                (data, w)
            }
            Variant::NoMixture => (policy_data.clone(), vec![1.0; policy_data.len()]),
            Variant::UniformMixture => {
                let uniform = PolicySet {
                    policies: policies.policies.clone(),
                    weights: vec![1.0; policies.len()],
                };
                let data = sample_mixture(&uniform, &env, cfg.dataset_size, &mut rng)?;
                let n = data.len();
                (data, vec![1.0; n])
            }
        };
        let uniform_fallback = weights.iter().all(|w| *w == 0.0);
        if uniform_fallback {
            log::warn!("iteration {i}: every agent trajectory looks expert-like; using uniform trajectory weights");
            weights.iter_mut().for_each(|w| *w = 1.0);
        }

        let agent_features = env.dataset_features(&agent_data);
        let adjust_stats = adjust(
            &mut constraint,
            &agent_features,
            &weights,
            &expert_features,
            &cfg.adjust,
            &mut rng,
        )
        .map_err(|e| Error::staged("constraint adjustment", i, e))?;

        let record = IterationRecord {
            iteration: i,
            cmse: if env.has_true_constraint() {
                Some(cmse(&constraint, &env)?)
            } else {
                None
            },
            nad: nad(expert, &policy_data, &env)?,
            policy_weight,
            uniform_fallback,
            adjust: adjust_stats,
            training,
        };
        log::info!(
            "iteration {i}: cmse {:?} nad {:.4} policy weight {:.3}",
            record.cmse,
            record.nad,
            record.policy_weight
        );
        observer.iteration_done(&record, &constraint, &policy, &policy_data)?;
        let done = cfg.epsilon.is_some_and(|eps| record.nad <= eps);
        records.push(record);
        latest = Some(policy);
        if done {
            converged_at = Some(i);
            break;
        }
    }

    let policy = match latest {
        Some(p) => p,
        None => PolicyNet::for_env(&env, &cfg.ppo.hidden, &mut rng)?,
    };
    Ok(IclResult {
        constraint,
        policy,
        policies,
        flow: flow_model,
        expert_stats: stats,
        records,
        converged_at,
    })
}
