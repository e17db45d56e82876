//! Measurements shared by the focused test files and the acceptance harness.

use super::{flow_relu_margin, max_relative_error, numeric_gradient, perturb, TwoStateMdp};
use icl_core::adjust::{soft_loss, soft_loss_gradient, AdjustConfig, ConstraintFn};
use icl_core::crl::{collect, correction_gradient, PolicyNet, ValueNet};
use icl_core::env::{Env, EnvId};
use icl_core::flow::{self, standard_normal_log_pdf, FlowConfig, FlowModel};
use icl_core::metrics::wasserstein_2d;
use icl_core::nn::log_softmax;
use icl_core::oracle::{simplex_solve, LpProblem, LpStatus};
use icl_core::{rng_from_seed, IclRng};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

pub const GRAD_H: f64 = 1e-5;
/// Entries smaller than this are compared on absolute error: at step
/// `GRAD_H` the difference quotients carry roundoff near 1e-10.
pub const GRAD_FLOOR: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
/// Sample points whose ReLU pre-activations lie this close to zero are
/// redrawn, so the difference stencil never straddles a kink.
pub const KINK_MARGIN: f64 = 1e-3;

pub fn policy_gradient_error(seed: u64) -> f64 {
    let mut rng = rng_from_seed(seed);
    let mut policy = PolicyNet::new(3, 4, &[16, 16], &mut rng).unwrap();
    perturb(&mut policy.net, 0.3, &mut rng);
    let obs: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let a = rng.random_range(0..4);
    let (logits, tape) = policy.net.forward(&obs).unwrap();
    let lp = log_softmax(&logits);
    let upstream: Vec<f64> = (0..4).map(|k| f64::from(k == a) - lp[k].exp()).collect();
    let analytic = policy.net.backward(&tape, &upstream).unwrap().flat();
    let numeric = numeric_gradient(&policy, |p| &mut p.net, |p| p.log_probs(&obs).unwrap()[a], GRAD_H);
    max_relative_error(&analytic, &numeric, GRAD_FLOOR)
}

pub fn value_gradient_error(seed: u64) -> f64 {
    let mut rng = rng_from_seed(seed);
    let value = ValueNet::new(4, &[16, 16], &mut rng).unwrap();
    let obs: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
    let (_, tape) = value.net.forward(&obs).unwrap();
    let analytic = value.net.backward(&tape, &[1.0]).unwrap().flat();
    let numeric = numeric_gradient(&value, |v| &mut v.net, |v| v.value(&obs).unwrap(), GRAD_H);
    max_relative_error(&analytic, &numeric, GRAD_FLOOR)
}

fn random_dataset(rng: &mut IclRng, n: usize) -> Vec<Vec<Vec<f64>>> {
    (0..n)
        .map(|_| {
            let len = rng.random_range(1..8);
            (0..len)
                .map(|_| vec![f64::from(rng.random_range(0..7)), f64::from(rng.random_range(0..7))])
                .collect()
        })
        .collect()
}

pub fn constraint_gradient_error(seed: u64) -> f64 {
    let env = Env::new(EnvId::GridworldA).unwrap();
    let mut rng = rng_from_seed(seed);
    let mut c = ConstraintFn::for_env(&env, &[16, 16], &mut rng).unwrap();
    // grid inputs standardize to exact zeros; nonzero biases keep ReLUs off their kinks
    perturb(&mut c.net, 0.2, &mut rng);
    let agent = random_dataset(&mut rng, 6);
    let weights: Vec<f64> = (0..6).map(|_| rng.random_range(0.1..1.0)).collect();
    let expert = random_dataset(&mut rng, 5);
    // alternate between an active and an inactive expert term
    let beta = if seed % 2 == 0 { 0.01 } else { 100.0 };
    let cfg = AdjustConfig {
        beta,
        gamma: 0.9,
        ..AdjustConfig::default()
    };
    let (_, grads) = soft_loss_gradient(&c, &agent, &weights, &expert, &cfg).unwrap();
    let numeric = numeric_gradient(
        &c,
        |c| &mut c.net,
        |c| soft_loss(c, &agent, &weights, &expert, &cfg).unwrap(),
        GRAD_H,
    );
    max_relative_error(&grads.flat(), &numeric, GRAD_FLOOR)
}

/// Largest error over every coupling's scale and translate networks.
pub fn flow_gradient_error(seed: u64) -> f64 {
    let cfg = FlowConfig {
        hidden: vec![12, 12],
        ..FlowConfig::default()
    };
    let mut rng = rng_from_seed(seed);
    let mut flow = FlowModel::new(2, vec![0.5, -0.2], vec![1.5, 0.7], &cfg, &mut rng).unwrap();
    for net in flow.networks_mut() {
        perturb(net, 0.2, &mut rng);
    }
    let mut points: Vec<Vec<f64>> = Vec::new();
    while points.len() < 5 {
        let p = vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        if flow_relu_margin(&flow, &p) > KINK_MARGIN {
            points.push(p);
        }
    }
    let mean_nll = |f: &FlowModel| points.iter().map(|p| f.nll(p).unwrap()).sum::<f64>() / points.len() as f64;
    let (value, grads) = flow.nll_gradient(&points).unwrap();
    assert!((value - mean_nll(&flow)).abs() < 1e-10);
    let mut worst: f64 = 0.0;
    for (k, (gs, gt)) in grads.iter().enumerate() {
        let ns = numeric_gradient(&flow, |f| &mut f.couplings[k].scale, mean_nll, GRAD_H);
        let nt = numeric_gradient(&flow, |f| &mut f.couplings[k].translate, mean_nll, GRAD_H);
        worst = worst
            .max(max_relative_error(&gs.flat(), &ns, GRAD_FLOOR))
            .max(max_relative_error(&gt.flat(), &nt, GRAD_FLOOR));
    }
    worst
}

/// `J(c)` by enumerating every action sequence of the two-state chain.
fn exact_j(policy: &PolicyNet, c: &[[f64; 2]; 2], horizon: usize) -> f64 {
    let obs = |s: usize| vec![f64::from(s == 0), f64::from(s == 1)];
    let probs = [policy.probs(&obs(0)).unwrap(), policy.probs(&obs(1)).unwrap()];
    let mut total = 0.0;
    for seq in 0..(1usize << horizon) {
        let (mut s, mut p, mut cost) = (0usize, 1.0, 0.0);
        for t in 0..horizon {
            let a = (seq >> t) & 1;
            p *= probs[s][a];
            cost += c[s][a];
            s = a;
        }
        total += p * cost;
    }
    total
}

/// Relative L2 error of the sampled score-function gradient of `J(c)`
/// against differentiation of the enumerated `J(c)`.
pub fn score_function_error(rollouts: usize) -> f64 {
    let horizon = 3;
    let table = [[1.0, 0.0], [0.3, 0.8]];
    let env = TwoStateMdp { horizon };
    let mut rng = rng_from_seed(11);
    let mut policy = PolicyNet::new(2, 2, &[8], &mut rng).unwrap();
    perturb(&mut policy.net, 0.5, &mut rng);
    let exact = numeric_gradient(&policy, |p| &mut p.net, |p| exact_j(p, &table, horizon), GRAD_H);
    let cost = |f: &[f64]| table[f[0] as usize][f[1] as usize];
    let batch = collect(&policy, &env, rollouts, &cost, 1.0, &mut rng).unwrap();
    let estimate = correction_gradient(&policy, &batch).unwrap().flat();
    let diff: f64 = estimate.iter().zip(&exact).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = exact.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm > 1e-2, "degenerate test gradient {norm}");
    diff / norm
}

pub fn gaussian_points(n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng_from_seed(seed);
    (0..n)
        .map(|_| vec![StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)])
        .collect()
}

/// Two well-separated anisotropic blobs.
pub fn bimodal_points(n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng_from_seed(seed);
    let wide = Normal::new(0.0, 0.6).unwrap();
    let narrow = Normal::new(0.0, 0.3).unwrap();
    (0..n)
        .map(|i| {
            let side = if i % 2 == 0 { -1.5 } else { 1.5 };
            vec![side + wide.sample(&mut rng), side * 0.5 + narrow.sample(&mut rng)]
        })
        .collect()
}

pub fn mean_nll(flow: &FlowModel, points: &[Vec<f64>]) -> f64 {
    points.iter().map(|p| flow.nll(p).unwrap()).sum::<f64>() / points.len() as f64
}

/// Whether an untrained flow's log-density equals the standard normal
/// log-pdf of the standardized point minus `Σ log std`, bit for bit.
pub fn identity_flow_is_exact() -> bool {
    let mut rng = rng_from_seed(10);
    let (mean, std) = (vec![3.0, -1.0, 0.5], vec![2.0, 0.5, 1.0]);
    let f = FlowModel::new(3, mean.clone(), std.clone(), &FlowConfig::default(), &mut rng).unwrap();
    let log_std: f64 = std.iter().map(|s| s.ln()).sum();
    [[3.0, -1.0, 0.5], [0.0, 0.0, 0.0], [10.0, 4.0, -7.0]].iter().all(|p| {
        let u: Vec<f64> = p.iter().zip(mean.iter().zip(&std)).map(|(x, (m, s))| (x - m) / s).collect();
        f.log_density(p).unwrap() == standard_normal_log_pdf(&u) - log_std
    })
}

/// Flow fitted to the bimodal sample, with its training points.
pub fn bimodal_flow() -> (FlowModel, Vec<Vec<f64>>) {
    let train = bimodal_points(1500, 4);
    let mut rng = rng_from_seed(5);
    let f = flow::fit(&train, &[false, false], &FlowConfig::default(), &mut rng).unwrap();
    (f, train)
}

/// Midpoint-rule integral of the density over `[-7, 7]²` with step 0.04.
pub fn density_integral(f: &FlowModel) -> f64 {
    let (lo, hi, step) = (-7.0, 7.0, 0.04);
    let n = ((hi - lo) / step) as usize;
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let p = [lo + (i as f64 + 0.5) * step, lo + (j as f64 + 0.5) * step];
            total += f.log_density(&p).unwrap().exp() * step * step;
        }
    }
    total
}

/// Worst reconstruction error and worst `|logdet_fwd + logdet_inv|` of a
/// trained flow over in- and out-of-distribution points.
pub fn inverse_errors() -> (f64, f64) {
    let train = bimodal_points(600, 6);
    let mut rng = rng_from_seed(7);
    let cfg = FlowConfig {
        epochs: 30,
        ..FlowConfig::default()
    };
    let f = flow::fit(&train, &[false, false], &cfg, &mut rng).unwrap();
    let (mut rec, mut ld): (f64, f64) = (0.0, 0.0);
    for p in bimodal_points(200, 8).iter().chain(&gaussian_points(200, 9)) {
        let (z, ld_fwd) = f.forward(p).unwrap();
        let (x, ld_inv) = f.inverse(&z).unwrap();
        rec = rec.max(p.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        ld = ld.max((ld_fwd + ld_inv).abs());
    }
    (rec, ld)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Transport cost as a dense LP over all `n²` flow variables.
pub fn dense_lp_cost(h1: &[f64], h2: &[f64], centers: &[Vec<f64>]) -> f64 {
    let n = centers.len();
    let mut objective = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            objective.push(-euclidean(&centers[i], &centers[j]));
        }
    }
    let mut lp = LpProblem::new(objective);
    for i in 0..n {
        let mut row = vec![0.0; n * n];
        row[i * n..(i + 1) * n].iter_mut().for_each(|v| *v = 1.0);
        lp.eq.push((row, h1[i]));
    }
    for j in 0..n {
        let mut row = vec![0.0; n * n];
        (0..n).for_each(|i| row[i * n + j] = 1.0);
        lp.eq.push((row, h2[j]));
    }
    let sol = simplex_solve(&lp).unwrap();
    assert_eq!(sol.status, LpStatus::Optimal);
    -sol.objective
}

/// Scale to unit mass, folding the rounding residue into the largest bin.
pub fn normalized(raw: &[f64]) -> Vec<f64> {
    let total: f64 = raw.iter().sum();
    let mut h: Vec<f64> = raw.iter().map(|v| v / total).collect();
    let drift = 1.0 - h.iter().sum::<f64>();
    let largest = (0..h.len()).max_by(|&i, &j| h[i].total_cmp(&h[j])).unwrap();
    h[largest] += drift;
    h
}

/// Sparse random histogram: about 30% of bins are empty.
pub fn random_histogram(n: usize, rng: &mut IclRng) -> Vec<f64> {
    let raw: Vec<f64> = (0..n)
        .map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.0..1.0) })
        .collect();
    if raw.iter().all(|v| *v == 0.0) {
        let mut h = vec![0.0; n];
        h[rng.random_range(0..n)] = 1.0;
        return h;
    }
    normalized(&raw)
}

/// Largest gap between the network simplex and the dense LP over random
/// instances of at most 16 bins with random planar centres.
pub fn transport_lp_gap(instances: usize) -> f64 {
    let mut rng = rng_from_seed(21);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let n = rng.random_range(1..=16);
        let centers: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)])
            .collect();
        let h1 = random_histogram(n, &mut rng);
        let h2 = random_histogram(n, &mut rng);
        let fast = wasserstein_2d(&h1, &h2, &centers).unwrap();
        worst = worst.max((fast - dense_lp_cost(&h1, &h2, &centers)).abs());
    }
    worst
}

pub fn grid_centers(side: usize) -> Vec<Vec<f64>> {
    (0..side)
        .flat_map(|x| (0..side).map(move |y| vec![x as f64, y as f64]))
        .collect()
}
