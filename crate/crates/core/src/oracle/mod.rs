//! Exact tabular alternation on finite MDPs via occupancy-measure LPs.
//!
//! Policy optimization under a constraint table `c` is the LP
//! `max ρ·r` over Bellman-flow occupancies with `ρ·c ≤ β`. Constraint
//! adjustment is the epigraph LP `max t` with `ρ_k·c ≥ t` for every policy
//! found so far, `ρ_E·c ≤ β` and `0 ≤ c ≤ 1`. Alternating the two from
//! `c = 0` recovers the expert occupancy on instances whose constrained
//! optimum is unique.

mod simplex;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use simplex::{simplex_solve, LpProblem, LpSolution, LpStatus};

use crate::error::{Error, Result};

/// Two occupancies closer than this (L∞) are treated as the same policy.
pub const OCCUPANCY_TOL: f64 = 1e-8;

/// Finite discounted MDP with a known constraint table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TabularMdp {
    pub num_states: usize,
    pub num_actions: usize,
    /// `transitions[s][a][s']`.
    pub transitions: Vec<Vec<Vec<f64>>>,
    /// `rewards[s][a] ≥ 0`.
    pub rewards: Vec<Vec<f64>>,
    pub initial: Vec<f64>,
    pub gamma: f64,
    /// `true_constraint[s][a]` used to produce the expert.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_constraint: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
}

/// The bundled five-state chain with one constrained shortcut.
pub const CHAIN_SPEC: &str = include_str!("../../data/chain5.json");

impl TabularMdp {
    pub fn validate(&self) -> Result<()> {
        let (ns, na) = (self.num_states, self.num_actions);
        if ns == 0 || na == 0 {
            return Err(Error::Config("MDP needs at least one state and action".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma must be in (0, 1), got {}", self.gamma)));
        }
        check_table("transitions", &self.transitions, ns, na)?;
        check_table("rewards", &self.rewards, ns, na)?;
        if self.initial.len() != ns {
            return Err(Error::dim("initial distribution", ns, self.initial.len()));
        }
        for (s, row) in self.transitions.iter().enumerate() {
            for (a, p) in row.iter().enumerate() {
                if p.len() != ns || p.iter().any(|v| !(*v >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(Error::Config(format!("transition row ({s}, {a}) is not a distribution")));
                }
            }
        }
        if self.rewards.iter().flatten().any(|r| !(*r >= 0.0) || !r.is_finite()) {
            return Err(Error::Config("rewards must be finite and non-negative".into()));
        }
        if self.initial.iter().any(|v| !(*v >= 0.0)) || (self.initial.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("initial distribution must sum to 1".into()));
        }
        if let Some(c) = &self.true_constraint {
            check_table("true_constraint", c, ns, na)?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: TabularMdp = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::from_json(&text).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn chain() -> Self {
        Self::from_json(CHAIN_SPEC).expect("bundled chain spec is valid")
    }

    pub fn num_pairs(&self) -> usize {
        self.num_states * self.num_actions
    }

    pub fn index(&self, s: usize, a: usize) -> usize {
        s * self.num_actions + a
    }

    pub fn flat_rewards(&self) -> Vec<f64> {
        self.rewards.iter().flatten().copied().collect()
    }

    pub fn flat_true_constraint(&self) -> Result<Vec<f64>> {
        self.true_constraint
            .as_ref()
            .map(|c| c.iter().flatten().copied().collect())
            .ok_or_else(|| Error::Config("MDP spec has no true constraint".into()))
    }

    /// Bellman-flow rows: `Σ_a ρ(s,a) − γ Σ_{s',a'} p(s|s',a') ρ(s',a') = μ(s)`.
    fn flow_rows(&self) -> Vec<(Vec<f64>, f64)> {
        (0..self.num_states)
            .map(|s| {
                let mut row = vec![0.0; self.num_pairs()];
                for sp in 0..self.num_states {
                    for a in 0..self.num_actions {
                        let k = self.index(sp, a);
                        if sp == s {
                            row[k] += 1.0;
                        }
                        row[k] -= self.gamma * self.transitions[sp][a][s];
                    }
                }
                (row, self.initial[s])
            })
            .collect()
    }

    /// Largest violation of the Bellman-flow equalities.
    pub fn flow_residual(&self, rho: &OccupancyMeasure) -> f64 {
        self.flow_rows()
            .iter()
            .map(|(row, b)| (dot(row, &rho.values) - b).abs())
            .fold(0.0, f64::max)
    }

    /// Optimal state values by value iteration (unconstrained).
    pub fn value_iteration(&self, tol: f64) -> Vec<f64> {
        let mut v = vec![0.0; self.num_states];
        loop {
            let next: Vec<f64> = (0..self.num_states)
                .map(|s| {
                    (0..self.num_actions)
                        .map(|a| self.q_value(&v, s, a))
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect();
            let delta = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            v = next;
            if delta < tol {
                return v;
            }
        }
    }

    pub fn q_value(&self, v: &[f64], s: usize, a: usize) -> f64 {
        self.rewards[s][a] + self.gamma * dot(&self.transitions[s][a], v)
    }
}

fn check_table<T>(name: &'static str, t: &[Vec<T>], ns: usize, na: usize) -> Result<()> {
    if t.len() != ns {
        return Err(Error::dim(name, ns, t.len()));
    }
    for row in t {
        if row.len() != na {
            return Err(Error::dim(name, na, row.len()));
        }
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Discounted state-action visitation `ρ(s, a)`, flattened state-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OccupancyMeasure {
    pub num_states: usize,
    pub num_actions: usize,
    pub values: Vec<f64>,
}

impl OccupancyMeasure {
    pub fn at(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.num_actions + a]
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn dot(&self, table: &[f64]) -> f64 {
        dot(&self.values, table)
    }

    pub fn linf_distance(&self, other: &OccupancyMeasure) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `π(a|s) = ρ(s,a)/Σ_a ρ(s,a)`, uniform for unvisited states.
    pub fn policy(&self) -> Vec<Vec<f64>> {
        (0..self.num_states)
            .map(|s| {
                let row: Vec<f64> = (0..self.num_actions).map(|a| self.at(s, a)).collect();
                let total: f64 = row.iter().sum();
                if total > 1e-12 {
                    row.iter().map(|v| v / total).collect()
                } else {
                    vec![1.0 / self.num_actions as f64; self.num_actions]
                }
            })
            .collect()
    }
}

fn occupancy_lp(mdp: &TabularMdp, objective: Vec<f64>) -> LpProblem {
    let mut lp = LpProblem::new(objective);
    lp.eq = mdp.flow_rows();
    lp
}

fn solved_occupancy(mdp: &TabularMdp, sol: LpSolution, what: &str) -> Result<OccupancyMeasure> {
    match sol.status {
        LpStatus::Optimal => Ok(OccupancyMeasure {
            num_states: mdp.num_states,
            num_actions: mdp.num_actions,
            values: sol.x,
        }),
        LpStatus::Infeasible => Err(Error::Infeasible(what.to_string())),
        LpStatus::Unbounded => Err(Error::Unbounded(what.to_string())),
    }
}

/// Reward-optimal occupancy subject to `ρ·c ≤ β`.
pub fn policy_lp(mdp: &TabularMdp, c: &[f64], beta: f64) -> Result<OccupancyMeasure> {
    if c.len() != mdp.num_pairs() {
        return Err(Error::dim("constraint table", mdp.num_pairs(), c.len()));
    }
    let mut lp = occupancy_lp(mdp, mdp.flat_rewards());
    lp.le.push((c.to_vec(), beta));
    let sol = simplex_solve(&lp)?;
    solved_occupancy(mdp, sol, &format!("no occupancy satisfies the constraint with beta {beta}"))
}

/// Whether the constrained optimum is unique: with the reward value pinned
/// at its optimum, every coordinate's range is below `tol`.
pub fn is_unique_optimum(mdp: &TabularMdp, c: &[f64], beta: f64, tol: f64) -> Result<bool> {
    let best = policy_lp(mdp, c, beta)?;
    let value = best.dot(&mdp.flat_rewards());
    for k in 0..mdp.num_pairs() {
        for sign in [1.0, -1.0] {
            let mut obj = vec![0.0; mdp.num_pairs()];
            obj[k] = sign;
            let mut lp = occupancy_lp(mdp, obj);
            lp.le.push((c.to_vec(), beta));
            lp.ge.push((mdp.flat_rewards(), value - 1e-9));
            let sol = simplex_solve(&lp)?;
            if sol.status != LpStatus::Optimal {
                return Ok(false);
            }
            if (sol.x[k] - best.values[k]).abs() > tol {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Result of [`adjust_lp`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdjustedConstraint {
    pub c: Vec<f64>,
    /// Optimal `min_k ρ_k·c`.
    pub t: f64,
    /// Optimal minimum over the policies distinct from the expert when the
    /// expert occupancy itself belongs to the list.
    pub t_others: Option<f64>,
}

fn epigraph_lp(occupancies: &[&OccupancyMeasure], expert: &OccupancyMeasure, beta: f64) -> LpProblem {
    let n = expert.values.len();
    // variables: c (n entries in [0, 1]) then t
    let mut obj = vec![0.0; n + 1];
    obj[n] = 1.0;
    let mut lp = LpProblem::new(obj);
    for j in 0..n {
        lp.upper[j] = Some(1.0);
    }
    for rho in occupancies {
        let mut row: Vec<f64> = rho.values.iter().map(|v| -v).collect();
        row.push(1.0);
        lp.le.push((row, 0.0));
    }
    let mut cap = expert.values.clone();
    cap.push(0.0);
    lp.le.push((cap, beta));
    lp
}

/// `max_c min_k ρ_k·c` subject to `ρ_E·c ≤ β` and `0 ≤ c ≤ 1`.
///
/// When some `ρ_k` equals `ρ_E`, its term is capped by `β` for every feasible
/// `c`, so a second LP maximizes the minimum over the remaining policies and
/// its solution is returned.
pub fn adjust_lp(occupancies: &[OccupancyMeasure], expert: &OccupancyMeasure, beta: f64) -> Result<AdjustedConstraint> {
    if occupancies.is_empty() {
        return Err(Error::Empty("policy occupancies"));
    }
    for rho in occupancies {
        if rho.values.len() != expert.values.len() {
            return Err(Error::dim("occupancy", expert.values.len(), rho.values.len()));
        }
    }
    if beta < 0.0 {
        return Err(Error::Infeasible(format!("beta {beta} < 0 admits no constraint in [0, 1]")));
    }
    let n = expert.values.len();
    let all: Vec<&OccupancyMeasure> = occupancies.iter().collect();
    let sol = simplex_solve(&epigraph_lp(&all, expert, beta))?;
    if sol.status != LpStatus::Optimal {
        return Err(Error::Infeasible("constraint adjustment".into()));
    }
    let t = sol.x[n];
    let others: Vec<&OccupancyMeasure> = occupancies
        .iter()
        .filter(|r| r.linf_distance(expert) > OCCUPANCY_TOL)
        .collect();
    if others.len() == occupancies.len() || others.is_empty() {
        return Ok(AdjustedConstraint {
            c: sol.x[..n].to_vec(),
            t,
            t_others: None,
        });
    }
    let sol2 = simplex_solve(&epigraph_lp(&others, expert, beta))?;
    if sol2.status != LpStatus::Optimal {
        return Err(Error::Infeasible("constraint adjustment against non-expert policies".into()));
    }
    Ok(AdjustedConstraint {
        c: sol2.x[..n].to_vec(),
        t,
        t_others: Some(sol2.x[n]),
    })
}

/// The explicit constraint `ĉ = r·β / (ρ_E·r)` from the convergence argument:
/// `ρ_E·ĉ = β` and `ρ·ĉ > β` for every occupancy with more reward.
pub fn proof_constraint(mdp: &TabularMdp, expert: &OccupancyMeasure, beta: f64) -> Result<Vec<f64>> {
    let r = mdp.flat_rewards();
    let j = expert.dot(&r);
    if !(j > 0.0) {
        return Err(Error::Config("expert reward value must be positive".into()));
    }
    Ok(r.iter().map(|v| v * beta / j).collect())
}

/// One alternation step, as recorded in the trace.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceEntry {
    pub iteration: usize,
    pub occupancy: OccupancyMeasure,
    pub reward: f64,
    /// Constraint after the adjustment of this iteration (absent on the
    /// final, repeated step).
    pub constraint: Option<Vec<f64>>,
    pub t: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlternationResult {
    pub expert: OccupancyMeasure,
    pub policies: Vec<OccupancyMeasure>,
    pub constraint: Vec<f64>,
    pub converged: bool,
    /// The occupancy returned last (the repeated one when converged).
    pub final_occupancy: Option<OccupancyMeasure>,
    pub trace: Vec<TraceEntry>,
}

impl AlternationResult {
    pub fn expert_distance(&self) -> Option<f64> {
        self.final_occupancy.as_ref().map(|o| o.linf_distance(&self.expert))
    }

    pub const TRACE_SCHEMA: &'static str = "icl-oracle-trace/1";

    pub fn write_trace_csv(&self, path: &Path) -> Result<()> {
        let mut w = crate::io::create_csv(path, Self::TRACE_SCHEMA)?;
        w.write_record(["iteration", "state", "action", "occupancy", "constraint"])?;
        for e in &self.trace {
            for s in 0..e.occupancy.num_states {
                for a in 0..e.occupancy.num_actions {
                    let k = s * e.occupancy.num_actions + a;
                    let c = e.constraint.as_ref().map_or(String::new(), |c| c[k].to_string());
                    w.write_record([
                        e.iteration.to_string(),
                        s.to_string(),
                        a.to_string(),
                        e.occupancy.values[k].to_string(),
                        c,
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Alternate policy optimization and constraint adjustment starting from
/// `c = 0` and an empty policy set, until the optimal occupancy repeats.
pub fn alternate(mdp: &TabularMdp, c_true: &[f64], beta: f64, max_iter: usize) -> Result<AlternationResult> {
    mdp.validate()?;
    let expert = policy_lp(mdp, c_true, beta).map_err(|e| Error::staged("expert policy", 0, e))?;
    let rewards = mdp.flat_rewards();
    let mut c = vec![0.0; mdp.num_pairs()];
    let mut policies: Vec<OccupancyMeasure> = Vec::new();
    let mut trace = Vec::new();
    let mut final_occupancy = None;
    let mut converged = false;
    for iteration in 0..max_iter {
        let rho = policy_lp(mdp, &c, beta).map_err(|e| Error::staged("policy optimization", iteration, e))?;
        let reward = rho.dot(&rewards);
        let repeated = policies.iter().any(|p| p.linf_distance(&rho) <= OCCUPANCY_TOL);
        final_occupancy = Some(rho.clone());
        if repeated {
            trace.push(TraceEntry {
                iteration,
                occupancy: rho,
                reward,
                constraint: None,
                t: None,
            });
            converged = true;
            break;
        }
        policies.push(rho.clone());
        let adj = adjust_lp(&policies, &expert, beta).map_err(|e| Error::staged("constraint adjustment", iteration, e))?;
        c = adj.c.clone();
        trace.push(TraceEntry {
            iteration,
            occupancy: rho,
            reward,
            constraint: Some(adj.c),
            t: Some(adj.t),
        });
    }
    Ok(AlternationResult {
        expert,
        policies,
        constraint: c,
        converged,
        final_occupancy,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two states; from state 0 action 1 pays 1 but is constrained, action 0 pays 0.5.
    fn two_path() -> TabularMdp {
        TabularMdp {
            num_states: 2,
            num_actions: 2,
            transitions: vec![vec![vec![0.0, 1.0], vec![0.0, 1.0]], vec![vec![0.0, 1.0], vec![0.0, 1.0]]],
            rewards: vec![vec![0.5, 1.0], vec![0.0, 0.0]],
            initial: vec![1.0, 0.0],
            gamma: 0.9,
            true_constraint: Some(vec![vec![0.0, 1.0], vec![0.0, 0.0]]),
            beta: Some(0.0),
        }
    }

    #[test]
    fn tight_budget_takes_safe_path() {
        let m = two_path();
        let rho = policy_lp(&m, &m.flat_true_constraint().unwrap(), 0.0).unwrap();
        assert!((rho.at(0, 0) - 1.0).abs() < 1e-9);
        assert!(rho.at(0, 1).abs() < 1e-9);
        assert!((rho.total() - 10.0).abs() < 1e-9);
        assert!(m.flow_residual(&rho) < 1e-9);
    }

    #[test]
    fn loose_budget_is_unconstrained() {
        let m = two_path();
        let loose = policy_lp(&m, &m.flat_true_constraint().unwrap(), 10.0).unwrap();
        let free = policy_lp(&m, &[0.0; 4], 0.0).unwrap();
        assert!(loose.linf_distance(&free) < 1e-9);
        assert!((free.at(0, 1) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn disjoint_support_gets_full_mass() {
        let expert = OccupancyMeasure {
            num_states: 2,
            num_actions: 1,
            values: vec![1.0, 0.0],
        };
        let other = OccupancyMeasure {
            num_states: 2,
            num_actions: 1,
            values: vec![0.0, 3.0],
        };
        let adj = adjust_lp(&[other], &expert, 0.5).unwrap();
        assert!((adj.t - 3.0).abs() < 1e-9);
    }

    #[test]
    fn identical_to_expert_is_capped() {
        let expert = OccupancyMeasure {
            num_states: 2,
            num_actions: 1,
            values: vec![1.0, 2.0],
        };
        let adj = adjust_lp(&[expert.clone()], &expert, 0.5).unwrap();
        assert!(adj.t <= 0.5 + 1e-9);
    }

    #[test]
    fn empty_expert_allows_all_ones() {
        let expert = OccupancyMeasure {
            num_states: 2,
            num_actions: 1,
            values: vec![0.0, 0.0],
        };
        let rho = OccupancyMeasure {
            num_states: 2,
            num_actions: 1,
            values: vec![1.0, 1.0],
        };
        let adj = adjust_lp(&[rho], &expert, 0.0).unwrap();
        assert!((adj.t - 2.0).abs() < 1e-9);
        assert!(adj.c.iter().all(|v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn zero_iterations_do_nothing() {
        let m = TabularMdp::chain();
        let r = alternate(&m, &m.flat_true_constraint().unwrap(), m.beta.unwrap(), 0).unwrap();
        assert!(!r.converged);
        assert!(r.policies.is_empty());
    }

    #[test]
    fn chain_recovers_expert() {
        let m = TabularMdp::chain();
        let r = alternate(&m, &m.flat_true_constraint().unwrap(), m.beta.unwrap(), 50).unwrap();
        assert!(r.converged);
        assert!(r.expert_distance().unwrap() < 1e-6);
    }
}
