//! Exact balanced transportation problems by the network simplex method.
//!
//! The basis is a spanning tree over source and sink nodes. Node potentials
//! satisfy `u_i + v_j = cost(i, j)` on tree edges; a non-tree edge with
//! negative reduced cost enters, flow is pushed around the cycle it closes,
//! and a blocking tree edge leaves.

use std::collections::VecDeque;

use crate::error::{Error, Result};

const REDUCED_COST_TOL: f64 = 1e-12;
const BALANCE_TOL: f64 = 1e-8;

/// Optimal flow between two mass vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    /// `flow[i][j]` moved from source bin `i` to sink bin `j`.
    pub flow: Vec<Vec<f64>>,
    pub cost: f64,
}

impl TransportPlan {
    pub fn row_sums(&self) -> Vec<f64> {
        self.flow.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let n = self.flow.first().map_or(0, Vec::len);
        (0..n).map(|j| self.flow.iter().map(|r| r[j]).sum()).collect()
    }
}

/// Minimum-cost plan moving `supply` onto `demand` with ground cost `cost(i, j)`.
pub fn solve_transport(supply: &[f64], demand: &[f64], cost: &dyn Fn(usize, usize) -> f64) -> Result<TransportPlan> {
    for v in supply.iter().chain(demand) {
        if !(v.is_finite() && *v >= 0.0) {
            return Err(Error::NonFinite(format!("transport mass {v}")));
        }
    }
    let (ts, td): (f64, f64) = (supply.iter().sum(), demand.iter().sum());
    if (ts - td).abs() > BALANCE_TOL {
        return Err(Error::Unbalanced(ts, td));
    }
    let mut flow = vec![vec![0.0; demand.len()]; supply.len()];
    let rows: Vec<usize> = (0..supply.len()).filter(|&i| supply[i] > 0.0).collect();
    let cols: Vec<usize> = (0..demand.len()).filter(|&j| demand[j] > 0.0).collect();
    if rows.is_empty() || cols.is_empty() {
        return Ok(TransportPlan { flow, cost: 0.0 });
    }
    let s: Vec<f64> = rows.iter().map(|&i| supply[i]).collect();
    let d: Vec<f64> = cols.iter().map(|&j| demand[j]).collect();
    let c: Vec<Vec<f64>> = rows.iter().map(|&i| cols.iter().map(|&j| cost(i, j)).collect()).collect();
    let reduced = NetworkSimplex::new(s, d, c).solve()?;
    let mut total = 0.0;
    for (&(r, k), &x) in reduced.basis.iter().zip(&reduced.x) {
        let x = x.max(0.0);
        flow[rows[r]][cols[k]] += x;
        total += x * reduced.cost[r][k];
    }
    Ok(TransportPlan { flow, cost: total })
}

struct NetworkSimplex {
    m: usize,
    n: usize,
    cost: Vec<Vec<f64>>,
    /// Tree edges `(row, col)` and their flows.
    basis: Vec<(usize, usize)>,
    x: Vec<f64>,
}

impl NetworkSimplex {
    fn new(s: Vec<f64>, d: Vec<f64>, cost: Vec<Vec<f64>>) -> Self {
        let (m, n) = (s.len(), d.len());
        // north-west corner start; exactly m + n - 1 tree edges, some possibly zero
        let (mut s, mut d) = (s, d);
        let mut basis = Vec::with_capacity(m + n - 1);
        let mut x = Vec::with_capacity(m + n - 1);
        let (mut i, mut j) = (0, 0);
        loop {
            let q = s[i].min(d[j]);
            basis.push((i, j));
            x.push(q);
            s[i] -= q;
            d[j] -= q;
            if i == m - 1 && j == n - 1 {
                break;
            }
            if (s[i] <= d[j] && i < m - 1) || j == n - 1 {
                i += 1;
            } else {
                j += 1;
            }
        }
        NetworkSimplex { m, n, cost, basis, x }
    }

    fn potentials(&self, adj: &[Vec<(usize, usize)>]) -> Vec<f64> {
        // nodes 0..m are rows, m..m+n are columns
        let mut pot = vec![f64::NAN; self.m + self.n];
        pot[0] = 0.0;
        let mut queue = VecDeque::from([0]);
        while let Some(a) = queue.pop_front() {
            for &(b, e) in &adj[a] {
                if pot[b].is_nan() {
                    let (r, k) = self.basis[e];
                    pot[b] = self.cost[r][k] - pot[a];
                    queue.push_back(b);
                }
            }
        }
        pot
    }

    fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.m + self.n];
        for (e, &(r, k)) in self.basis.iter().enumerate() {
            adj[r].push((self.m + k, e));
            adj[self.m + k].push((r, e));
        }
        adj
    }

    /// Tree edges on the path from node `from` to node `to`, in order.
    fn path(&self, adj: &[Vec<(usize, usize)>], from: usize, to: usize) -> Vec<usize> {
        let mut prev: Vec<Option<(usize, usize)>> = vec![None; self.m + self.n];
        let mut seen = vec![false; self.m + self.n];
        seen[from] = true;
        let mut queue = VecDeque::from([from]);
        while let Some(a) = queue.pop_front() {
            if a == to {
                break;
            }
            for &(b, e) in &adj[a] {
                if !seen[b] {
                    seen[b] = true;
                    prev[b] = Some((a, e));
                    queue.push_back(b);
                }
            }
        }
        let mut edges = Vec::new();
        let mut cur = to;
        while let Some((p, e)) = prev[cur] {
            edges.push(e);
            cur = p;
        }
        edges.reverse();
        edges
    }

    fn solve(mut self) -> Result<Self> {
        let max_iter = 50 * (self.m + self.n) * (self.m + self.n) + 100;
        for iter in 0..max_iter {
            let adj = self.adjacency();
            let pot = self.potentials(&adj);
            // Dantzig pricing first; smallest-index pricing late on to rule out cycling
            let bland = iter > max_iter / 2;
            let mut entering = None;
            let mut best = -REDUCED_COST_TOL;
            'scan: for r in 0..self.m {
                for k in 0..self.n {
                    let rc = self.cost[r][k] - pot[r] - pot[self.m + k];
                    if rc < best {
                        entering = Some((r, k));
                        if bland {
                            break 'scan;
                        }
                        best = rc;
                    }
                }
            }
            let Some((r, k)) = entering else {
                return Ok(self);
            };
            // cycle: entering edge (+), then the tree path from column k back to row r
            let cycle = self.path(&adj, self.m + k, r);
            let mut theta = f64::INFINITY;
            let mut leave = None;
            for (pos, &e) in cycle.iter().enumerate() {
                if pos % 2 == 0 && self.x[e] < theta {
                    theta = self.x[e];
                    leave = Some(e);
                }
            }
            let leave = leave.ok_or_else(|| Error::Unbounded("transport cycle without a decreasing edge".into()))?;
            for (pos, &e) in cycle.iter().enumerate() {
                if pos % 2 == 0 {
                    self.x[e] -= theta;
                } else {
                    self.x[e] += theta;
                }
            }
            self.basis[leave] = (r, k);
            self.x[leave] = theta;
        }
        Err(Error::Infeasible("network simplex did not terminate".into()))
    }
}
