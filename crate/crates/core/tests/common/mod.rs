#![allow(dead_code)]

pub mod checks;

use icl_core::env::{Environment, Transition};
use icl_core::flow::FlowModel;
use icl_core::nn::{Activation, MlpParams};
use icl_core::oracle::{is_unique_optimum, policy_lp, TabularMdp};
use icl_core::{rng_from_seed, IclRng, Result, State, Step, Trajectory};
use rand::Rng;

/// Add uniform noise in `[-amount, amount]` to every parameter.
pub fn perturb(net: &mut MlpParams, amount: f64, rng: &mut IclRng) {
    for l in &mut net.layers {
        for v in l.weights.iter_mut().chain(l.bias.iter_mut()) {
            *v += rng.random_range(-amount..amount);
        }
    }
}

/// Largest `|a - b| / max(|a|, |b|, floor)` over paired entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Fourth-order central differences of `f` with respect to every parameter
/// of the network selected by `select`.
pub fn numeric_gradient<T: Clone>(
    model: &T,
    select: impl for<'a> Fn(&'a mut T) -> &'a mut MlpParams,
    f: impl Fn(&T) -> f64,
    h: f64,
) -> Vec<f64> {
    let mut m = model.clone();
    let n = select(&mut m).num_params();
    (0..n)
        .map(|i| {
            let orig = *select(&mut m).param_mut(i);
            let mut at = |delta: f64| {
                *select(&mut m).param_mut(i) = orig + delta;
                f(&m)
            };
            let g = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
            *select(&mut m).param_mut(i) = orig;
            g
        })
        .collect()
}

/// Smallest `|pre-activation|` over the ReLU units of `net` at `input`.
pub fn relu_margin(net: &MlpParams, input: &[f64]) -> f64 {
    let mut x = input.to_vec();
    let mut margin = f64::INFINITY;
    for l in &net.layers {
        let z: Vec<f64> = (0..l.outputs)
            .map(|j| l.bias[j] + (0..l.inputs).map(|i| l.weights[j * l.inputs + i] * x[i]).sum::<f64>())
            .collect();
        if l.activation == Activation::Relu {
            margin = z.iter().fold(margin, |m, v| m.min(v.abs()));
        }
        x = z.iter().map(|v| l.activation.apply(*v)).collect();
    }
    margin
}

/// Smallest ReLU margin over every coupling network evaluated at `point`.
pub fn flow_relu_margin(flow: &FlowModel, point: &[f64]) -> f64 {
    let mut u: Vec<f64> = point.iter().zip(flow.mean.iter().zip(&flow.std)).map(|(x, (m, s))| (x - m) / s).collect();
    let mut margin = f64::INFINITY;
    for c in &flow.couplings {
        let xm: Vec<f64> = u.iter().zip(&c.mask).map(|(v, &keep)| if keep { *v } else { 0.0 }).collect();
        margin = margin.min(relu_margin(&c.scale, &xm)).min(relu_margin(&c.translate, &xm));
        let raw = c.scale.eval(&xm).unwrap();
        let t = c.translate.eval(&xm).unwrap();
        for j in 0..u.len() {
            if !c.mask[j] {
                u[j] = u[j] * (flow.scale_bound * raw[j].tanh()).exp() + t[j];
            }
        }
    }
    margin
}

fn random_distribution(n: usize, rng: &mut IclRng) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| v / total).collect()
}

/// Random MDP with `γ = 0.9` and no constraint attached.
pub fn random_mdp(num_states: usize, num_actions: usize, rng: &mut IclRng) -> TabularMdp {
    let transitions = (0..num_states)
        .map(|_| (0..num_actions).map(|_| random_distribution(num_states, rng)).collect())
        .collect();
    let rewards = (0..num_states)
        .map(|_| (0..num_actions).map(|_| rng.random_range(0.0..1.0)).collect())
        .collect();
    let mut initial = vec![0.0; num_states];
    initial[rng.random_range(0..num_states)] = 1.0;
    TabularMdp {
        num_states,
        num_actions,
        transitions,
        rewards,
        initial,
        gamma: 0.9,
        true_constraint: None,
        beta: None,
    }
}

/// An MDP with a binary constraint table and a threshold for which the
/// constrained optimum is unique and differs from the unconstrained one.
#[derive(Clone, Debug)]
pub struct ConstrainedInstance {
    pub mdp: TabularMdp,
    pub c: Vec<f64>,
    pub beta: f64,
}

pub fn constrained_instance(seed: u64) -> ConstrainedInstance {
    let mut rng = rng_from_seed(seed);
    loop {
        let ns = rng.random_range(3..=6);
        let na = rng.random_range(2..=3);
        let mut mdp = random_mdp(ns, na, &mut rng);
        let c: Vec<f64> = (0..ns * na).map(|_| f64::from(rng.random_bool(0.4))).collect();
        if let Some(beta) = pick_beta(&mdp, &c, &mut rng) {
            mdp.true_constraint = Some(c.chunks(na).map(<[f64]>::to_vec).collect());
            mdp.beta = Some(beta);
            return ConstrainedInstance { mdp, c, beta };
        }
    }
}

fn pick_beta(mdp: &TabularMdp, c: &[f64], rng: &mut IclRng) -> Option<f64> {
    let free = policy_lp(mdp, &vec![0.0; c.len()], 0.0).ok()?;
    let high = free.dot(c);
    // lowest achievable constraint value: maximize reward −c with no cap
    let mut neg = mdp.clone();
    neg.rewards = (0..mdp.num_states)
        .map(|s| (0..mdp.num_actions).map(|a| 1.0 - c[mdp.index(s, a)]).collect())
        .collect();
    let low = policy_lp(&neg, &vec![0.0; c.len()], 0.0).ok()?.dot(c);
    if high - low < 0.5 {
        return None;
    }
    let beta = low + rng.random_range(0.2..0.8) * (high - low);
    let constrained = policy_lp(mdp, c, beta).ok()?;
    if constrained.linf_distance(&free) < 1e-4 {
        return None;
    }
    is_unique_optimum(mdp, c, beta, 1e-7).ok()?.then_some(beta)
}

/// Two states, two actions; action `a` moves to state `a`. Episodes last
/// `horizon` steps from state 0. Observations are one-hot states and
/// constraint features are `(state, action)`.
pub struct TwoStateMdp {
    pub horizon: usize,
}

impl Environment for TwoStateMdp {
    fn num_actions(&self) -> usize {
        2
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn reset(&self, _rng: &mut IclRng) -> Result<State> {
        Ok(State(vec![0.0]))
    }

    fn step(&self, _state: &State, action: usize, t: usize, _rng: &mut IclRng) -> Result<Transition> {
        let done = t + 1 >= self.horizon;
        Ok(Transition {
            next_state: State(vec![action as f64]),
            reward: 0.0,
            done,
            terminated: false,
            true_constraint_value: None,
        })
    }

    fn observation(&self, state: &State) -> Vec<f64> {
        let s = state.0[0] as usize;
        vec![f64::from(s == 0), f64::from(s == 1)]
    }

    fn constraint_features(&self, state: &State, action: usize) -> Vec<f64> {
        vec![state.0[0], action as f64]
    }
}

/// Episodes driven by a hand-written policy `choose(state, rng)`.
pub fn scripted_rollouts(
    env: &dyn Environment,
    n: usize,
    choose: impl Fn(&State, &mut IclRng) -> usize,
    rng: &mut IclRng,
) -> Vec<Trajectory> {
    (0..n)
        .map(|_| {
            let mut state = env.reset(rng).unwrap();
            let mut traj = Trajectory::new();
            for t in 0..env.horizon() {
                let action = choose(&state, rng);
                let tr = env.step(&state, action, t, rng).unwrap();
                traj.steps.push(Step {
                    state,
                    action,
                    reward: tr.reward,
                    done: tr.done,
                });
                if tr.done {
                    break;
                }
                state = tr.next_state;
            }
            traj
        })
        .collect()
}

/// Gridworld: climb to the top row, then move right.
pub fn grid_route(state: &State, _rng: &mut IclRng) -> usize {
    if state.0[1] < 6.0 {
        1
    } else {
        0
    }
}

/// Cartpole: bang-bang balance with a slow pull toward `x = 0`.
pub fn cart_balance(state: &State, _rng: &mut IclRng) -> usize {
    let s = &state.0;
    let push = 0.5 * s[0] + 1.0 * s[1] + 10.0 * s[2] + 1.5 * s[3];
    usize::from(push > 0.0)
}

pub fn uniform_random(num_actions: usize) -> impl Fn(&State, &mut IclRng) -> usize {
    move |_, rng| rng.random_range(0..num_actions)
}
