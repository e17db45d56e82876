mod common;

use common::{grid_route, scripted_rollouts};
use icl_core::adjust::ConstraintFn;
use icl_core::crl::PolicyNet;
use icl_core::env::{Env, EnvId};
use icl_core::flow::{ExpertNllStats, FlowModel};
use icl_core::icl::{run, run_variant, IclConfig, IclObserver, IterationRecord, Variant};
use icl_core::{rng_from_seed, Result, Trajectory};

fn tiny_config(seed: u64) -> IclConfig {
    let mut cfg = IclConfig::for_env(EnvId::GridworldA).unwrap();
    cfg.seed = seed;
    cfg.iterations = 3;
    cfg.dataset_size = 10;
    cfg.constraint_hidden = vec![16];
    cfg.ppo.epochs = 3;
    cfg.ppo.hidden = vec![16];
    cfg.ppo.updates_per_epoch = 4;
    cfg.adjust.epochs = 2;
    cfg.flow.epochs = 3;
    cfg.flow.hidden = vec![16];
    cfg
}

fn expert() -> Vec<Trajectory> {
    let env = Env::new(EnvId::GridworldA).unwrap();
    scripted_rollouts(&env, 10, grid_route, &mut rng_from_seed(0))
}

#[derive(Default)]
struct Counter {
    flows: Vec<FlowModel>,
    iterations: Vec<usize>,
}

impl IclObserver for Counter {
    fn flow_fitted(&mut self, flow: &FlowModel, _stats: &ExpertNllStats) -> Result<()> {
        self.flows.push(flow.clone());
        Ok(())
    }

    fn iteration_done(&mut self, record: &IterationRecord, _c: &ConstraintFn, _p: &PolicyNet, _d: &[Trajectory]) -> Result<()> {
        self.iterations.push(record.iteration);
        Ok(())
    }
}

#[test]
fn loop_grows_policy_set_and_fits_flow_once() {
    let cfg = tiny_config(4);
    let mut counter = Counter::default();
    let res = run_variant(&cfg, &expert(), Variant::Full, &mut counter).unwrap();
    assert_eq!(res.policies.len(), 3);
    assert_eq!(res.records.len(), 3);
    assert_eq!(counter.iterations, vec![0, 1, 2]);
    assert_eq!(counter.flows.len(), 1);
    assert_eq!(counter.flows[0], res.flow);
    assert!(res.policies.weights.iter().all(|w| (0.0..=1.0).contains(w)));
    assert!(res.records.iter().all(|r| r.cmse.is_some_and(|v| (0.0..=1.0).contains(&v))));
}

#[test]
fn runs_are_bit_reproducible() {
    let cfg = tiny_config(9);
    let a = run(&cfg, &expert()).unwrap();
    let b = run(&cfg, &expert()).unwrap();
    assert_eq!(a.constraint, b.constraint);
    assert_eq!(a.policy, b.policy);
    assert_eq!(a.records, b.records);
    let c = run(&tiny_config(10), &expert()).unwrap();
    assert_ne!(a.constraint, c.constraint);
}

#[test]
fn early_exit_caps_history() {
    let mut cfg = tiny_config(2);
    cfg.epsilon = Some(f64::INFINITY);
    let res = run(&cfg, &expert()).unwrap();
    assert_eq!(res.records.len(), 1);
    assert_eq!(res.converged_at, Some(0));
}

#[test]
fn ablation_variants_run() {
    for variant in [Variant::NoMixture, Variant::UniformMixture] {
        let res = run_variant(&tiny_config(1), &expert(), variant, &mut Counter::default()).unwrap();
        assert_eq!(res.records.len(), 3);
    }
}

#[test]
fn config_round_trips_and_rejects_unknown_fields() {
    let cfg = tiny_config(5);
    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(serde_json::from_str::<IclConfig>(&text).unwrap(), cfg);
    let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
    value["bogus"] = serde_json::json!(1);
    assert!(serde_json::from_value::<IclConfig>(value).is_err());
}
