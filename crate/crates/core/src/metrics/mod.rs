//! Constraint mean squared error and the normalized accrual dissimilarity.

mod transport;

use serde::{Deserialize, Serialize};

pub use transport::{solve_transport, TransportPlan};

use crate::crl::ConstraintSignal;
use crate::env::{Env, Environment, GridLayout};
use crate::error::{Error, Result};
use crate::trajectory::Trajectory;

const NORMALIZATION_TOL: f64 = 1e-8;

/// Visitation mass per bin of an environment's discretization grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccrualHistogram {
    pub mass: Vec<f64>,
}

impl AccrualHistogram {
    pub fn total(&self) -> f64 {
        self.mass.iter().sum()
    }

    pub fn is_normalized(&self) -> bool {
        self.mass.iter().all(|m| *m >= 0.0) && (self.total() - 1.0).abs() <= NORMALIZATION_TOL
    }
}

/// Mean squared difference to the true constraint over the discretization grid.
pub fn cmse(c: &dyn ConstraintSignal, env: &Env) -> Result<f64> {
    if !env.has_true_constraint() {
        return Err(Error::UnsupportedMetric(format!("{} has no true constraint", env.id())));
    }
    let grid = env.discretization_grid();
    let mut total = 0.0;
    for p in &grid.points {
        let truth = env.true_constraint_at(p).unwrap_or(0.0);
        total += (truth - c.value(p)?).powi(2);
    }
    Ok(total / grid.len() as f64)
}

/// Normalized counts of state-action pairs snapped to their nearest grid bin.
pub fn accrual(data: &[Trajectory], env: &Env) -> Result<AccrualHistogram> {
    let grid = env.discretization_grid();
    let mut mass = vec![0.0; grid.len()];
    let mut count = 0usize;
    for t in data {
        for s in &t.steps {
            mass[grid.nearest(&env.constraint_features(&s.state, s.action))] += 1.0;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Empty("accrual dataset"));
    }
    for m in &mut mass {
        *m /= count as f64;
    }
    Ok(AccrualHistogram { mass })
}

fn check_normalized(h: &[f64]) -> Result<()> {
    let total: f64 = h.iter().sum();
    if h.iter().any(|m| !(*m >= 0.0)) || (total - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::Unnormalized(total));
    }
    Ok(())
}

/// Exact W₁ on the line: `Σ_i |CDF₁(x_i) − CDF₂(x_i)| (x_{i+1} − x_i)`.
/// `positions` must be sorted ascending.
pub fn wasserstein_1d(h1: &[f64], h2: &[f64], positions: &[f64]) -> Result<f64> {
    if h1.len() != positions.len() || h2.len() != positions.len() {
        return Err(Error::dim("1-D histogram", positions.len(), h1.len().min(h2.len())));
    }
    check_normalized(h1)?;
    check_normalized(h2)?;
    let (mut c1, mut c2, mut total) = (0.0, 0.0, 0.0);
    for i in 0..positions.len().saturating_sub(1) {
        c1 += h1[i];
        c2 += h2[i];
        let dx = positions[i + 1] - positions[i];
        if dx < 0.0 {
            return Err(Error::Config("positions must be sorted ascending".into()));
        }
        total += (c1 - c2).abs() * dx;
    }
    Ok(total)
}

/// Exact W₁ with Euclidean ground cost between histograms on shared bin centres.
pub fn wasserstein_2d(h1: &[f64], h2: &[f64], centers: &[Vec<f64>]) -> Result<f64> {
    Ok(transport_plan(h1, h2, centers)?.cost)
}

/// The optimal plan behind [`wasserstein_2d`].
pub fn transport_plan(h1: &[f64], h2: &[f64], centers: &[Vec<f64>]) -> Result<TransportPlan> {
    if h1.len() != centers.len() || h2.len() != centers.len() {
        return Err(Error::dim("2-D histogram", centers.len(), h1.len().min(h2.len())));
    }
    if centers.len() > 10_000 {
        return Err(Error::Config(format!("{} bins exceed the 10000-bin limit", centers.len())));
    }
    check_normalized(h1)?;
    check_normalized(h2)?;
    let cost = |i: usize, j: usize| euclidean(&centers[i], &centers[j]);
    solve_transport(h1, h2, &cost)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Per-action 1-D distances for a `PerAction` grid. Each action's slice is
/// renormalized; a slice empty in both histograms contributes 0, one empty in
/// exactly one histogram contributes the full position span.
pub fn per_action_distances(h1: &AccrualHistogram, h2: &AccrualHistogram, positions: &[f64], actions: usize) -> Result<Vec<f64>> {
    let n = positions.len();
    if h1.mass.len() != n * actions || h2.mass.len() != n * actions {
        return Err(Error::dim("per-action histogram", n * actions, h1.mass.len().min(h2.mass.len())));
    }
    let span = positions.last().copied().unwrap_or(0.0) - positions.first().copied().unwrap_or(0.0);
    let mut out = Vec::with_capacity(actions);
    for a in 0..actions {
        let s1 = &h1.mass[a * n..(a + 1) * n];
        let s2 = &h2.mass[a * n..(a + 1) * n];
        let (t1, t2): (f64, f64) = (s1.iter().sum(), s2.iter().sum());
        let d = match (t1 > 0.0, t2 > 0.0) {
            (false, false) => 0.0,
            (true, true) => {
                let n1: Vec<f64> = s1.iter().map(|m| m / t1).collect();
                let n2: Vec<f64> = s2.iter().map(|m| m / t2).collect();
                wasserstein_1d(&n1, &n2, positions)?
            }
            _ => span,
        };
        out.push(d);
    }
    Ok(out)
}

/// Distance between two normalized accruals under the grid's layout.
pub fn accrual_distance(h1: &AccrualHistogram, h2: &AccrualHistogram, env: &Env) -> Result<f64> {
    let grid = env.discretization_grid();
    match &grid.layout {
        GridLayout::Plane => wasserstein_2d(&h1.mass, &h2.mass, &grid.points),
        GridLayout::PerAction { positions, actions } => {
            Ok(per_action_distances(h1, h2, positions, *actions)?.iter().sum())
        }
    }
}

/// Normalized accrual dissimilarity between two datasets.
pub fn nad(expert: &[Trajectory], agent: &[Trajectory], env: &Env) -> Result<f64> {
    accrual_distance(&accrual(expert, env)?, &accrual(agent, env)?, env)
}
