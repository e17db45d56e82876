//! Dense two-phase primal simplex with Bland's anti-cycling rule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const EPS: f64 = 1e-10;

/// `maximize objective·x` subject to the listed rows, `x ≥ 0` and optional
/// per-variable upper bounds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LpProblem {
    pub objective: Vec<f64>,
    /// Rows `a·x ≤ b`.
    pub le: Vec<(Vec<f64>, f64)>,
    /// Rows `a·x ≥ b`.
    pub ge: Vec<(Vec<f64>, f64)>,
    /// Rows `a·x = b`.
    pub eq: Vec<(Vec<f64>, f64)>,
    pub upper: Vec<Option<f64>>,
}

impl LpProblem {
    pub fn new(objective: Vec<f64>) -> Self {
        let n = objective.len();
        LpProblem {
            objective,
            upper: vec![None; n],
            ..Default::default()
        }
    }

    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    fn validate(&self) -> Result<()> {
        let n = self.num_vars();
        if self.upper.len() != n {
            return Err(Error::dim("variable bounds", n, self.upper.len()));
        }
        for (row, b) in self.le.iter().chain(&self.ge).chain(&self.eq) {
            if row.len() != n {
                return Err(Error::dim("constraint row", n, row.len()));
            }
            if !b.is_finite() || row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("linear program data".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LpSolution {
    pub status: LpStatus,
    /// Empty unless optimal.
    pub x: Vec<f64>,
    pub objective: f64,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Sense {
    Le,
    Ge,
    Eq,
}

struct Tableau {
    /// `rows × (cols + 1)`; the last column is the right-hand side.
    a: Vec<Vec<f64>>,
    basis: Vec<usize>,
    cols: usize,
}

impl Tableau {
    fn rhs(&self, i: usize) -> f64 {
        self.a[i][self.cols]
    }

    fn pivot(&mut self, r: usize, c: usize) {
        let p = self.a[r][c];
        for v in &mut self.a[r] {
            *v /= p;
        }
        let pivot_row = self.a[r].clone();
        for (i, row) in self.a.iter_mut().enumerate() {
            if i == r {
                continue;
            }
            let f = row[c];
            if f != 0.0 {
                for (v, pv) in row.iter_mut().zip(&pivot_row) {
                    *v -= f * pv;
                }
                row[c] = 0.0;
            }
        }
        self.basis[r] = c;
    }

    /// Maximizes `cost·x` over the columns allowed by `allowed`.
    /// Returns `false` when unbounded.
    fn optimize(&mut self, cost: &[f64], allowed: &dyn Fn(usize) -> bool) -> bool {
        loop {
            // reduced profit d_j = c_j - Σ_i c_B(i) a_ij; Bland: lowest improving index
            let mut entering = None;
            for j in 0..self.cols {
                if !allowed(j) || self.basis.contains(&j) {
                    continue;
                }
                let z: f64 = self.basis.iter().enumerate().map(|(i, &b)| cost[b] * self.a[i][j]).sum();
                if cost[j] - z > EPS {
                    entering = Some(j);
                    break;
                }
            }
            let Some(c) = entering else {
                return true;
            };
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..self.a.len() {
                let aij = self.a[i][c];
                if aij > EPS {
                    let ratio = self.rhs(i) / aij;
                    let better = match leave {
                        None => true,
                        Some((k, best)) => ratio < best - EPS || (ratio <= best + EPS && self.basis[i] < self.basis[k]),
                    };
                    if better {
                        leave = Some((i, ratio));
                    }
                }
            }
            let Some((r, _)) = leave else {
                return false;
            };
            self.pivot(r, c);
        }
    }
}

/// Solve `lp`. Infeasibility and unboundedness are statuses; only malformed
/// problems are errors.
pub fn simplex_solve(lp: &LpProblem) -> Result<LpSolution> {
    lp.validate()?;
    let n = lp.num_vars();
    let mut rows: Vec<(Vec<f64>, f64, Sense)> = Vec::new();
    rows.extend(lp.le.iter().map(|(a, b)| (a.clone(), *b, Sense::Le)));
    rows.extend(lp.ge.iter().map(|(a, b)| (a.clone(), *b, Sense::Ge)));
    rows.extend(lp.eq.iter().map(|(a, b)| (a.clone(), *b, Sense::Eq)));
    for (j, u) in lp.upper.iter().enumerate() {
        if let Some(u) = u {
            let mut a = vec![0.0; n];
            a[j] = 1.0;
            rows.push((a, *u, Sense::Le));
        }
    }
    // make every right-hand side non-negative
    for (a, b, s) in &mut rows {
        if *b < 0.0 {
            a.iter_mut().for_each(|v| *v = -*v);
            *b = -*b;
            *s = match s {
                Sense::Le => Sense::Ge,
                Sense::Ge => Sense::Le,
                Sense::Eq => Sense::Eq,
            };
        }
    }
    let m = rows.len();
    let n_slack = rows.iter().filter(|r| r.2 != Sense::Eq).count();
    let n_art = rows.iter().filter(|r| r.2 != Sense::Le).count();
    let cols = n + n_slack + n_art;
    let art_start = n + n_slack;
    let mut a = vec![vec![0.0; cols + 1]; m];
    let mut basis = vec![0; m];
    let (mut si, mut ai) = (n, art_start);
    for (i, (row, b, sense)) in rows.iter().enumerate() {
        a[i][..n].copy_from_slice(row);
        a[i][cols] = *b;
        match sense {
            Sense::Le => {
                a[i][si] = 1.0;
                basis[i] = si;
                si += 1;
            }
            Sense::Ge => {
                a[i][si] = -1.0;
                si += 1;
                a[i][ai] = 1.0;
                basis[i] = ai;
                ai += 1;
            }
            Sense::Eq => {
                a[i][ai] = 1.0;
                basis[i] = ai;
                ai += 1;
            }
        }
    }
    let mut t = Tableau { a, basis, cols };

    if n_art > 0 {
        let phase1: Vec<f64> = (0..cols).map(|j| if j >= art_start { -1.0 } else { 0.0 }).collect();
        t.optimize(&phase1, &|_| true);
        let infeasibility: f64 = (0..m).filter(|&i| t.basis[i] >= art_start).map(|i| t.rhs(i)).sum();
        if infeasibility > 1e-8 {
            return Ok(LpSolution {
                status: LpStatus::Infeasible,
                x: Vec::new(),
                objective: f64::NAN,
            });
        }
        // drive zero-level artificials out of the basis; drop redundant rows
        let mut i = 0;
        while i < t.a.len() {
            if t.basis[i] >= art_start {
                match (0..art_start).find(|&j| t.a[i][j].abs() > 1e-9) {
                    Some(j) => {
                        t.pivot(i, j);
                        i += 1;
                    }
                    None => {
                        t.a.remove(i);
                        t.basis.remove(i);
                    }
                }
            } else {
                i += 1;
            }
        }
    }

    let mut cost = vec![0.0; cols];
    cost[..n].copy_from_slice(&lp.objective);
    if !t.optimize(&cost, &|j| j < art_start) {
        return Ok(LpSolution {
            status: LpStatus::Unbounded,
            x: Vec::new(),
            objective: f64::INFINITY,
        });
    }
    let mut x = vec![0.0; n];
    for (i, &b) in t.basis.iter().enumerate() {
        if b < n {
            x[b] = t.rhs(i).max(0.0);
        }
    }
    let objective = x.iter().zip(&lp.objective).map(|(a, b)| a * b).sum();
    Ok(LpSolution {
        status: LpStatus::Optimal,
        x,
        objective,
    })
}
