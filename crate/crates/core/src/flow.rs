//! RealNVP density model over constraint-input features.
//!
//! The model maps a feature vector `x` to a latent `z` through a fixed
//! standardization followed by affine coupling layers. Each coupling keeps the
//! masked coordinates and updates the others as `u ← u·exp(s) + t`, where `s`
//! and `t` are MLPs of the masked coordinates and `s` is bounded by
//! `bound·tanh(·)`. The density is `N(z; 0, I)·|det ∂z/∂x|`.
//!
//! The fitted model supplies the expert NLL statistics and the per-trajectory
//! dissimilarity weights used to reweight agent data during adjustment.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, GradBuffer, MlpParams, Optimizer, Tape};
use crate::IclRng;

const LOG_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub coupling_layers: usize,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// `s = scale_bound · tanh(raw)`.
    pub scale_bound: f64,
    /// Half-width of the uniform noise added to discrete features while fitting.
    pub dequantization: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            coupling_layers: 4,
            hidden: vec![64, 64],
            epochs: 200,
            batch_size: 64,
            lr: 5e-4,
            scale_bound: 2.0,
            dequantization: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    /// `true` marks coordinates passed through unchanged (the conditioning set).
    pub mask: Vec<bool>,
    pub scale: MlpParams,
    pub translate: MlpParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowModel {
    pub couplings: Vec<Coupling>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub scale_bound: f64,
}

/// Mean and standard deviation of the expert negative log-density.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertNllStats {
    pub mu: f64,
    pub sigma: f64,
}

impl ExpertNllStats {
    pub fn threshold(&self) -> f64 {
        self.mu + self.sigma
    }
}

struct CouplingTrace {
    input: Vec<f64>,
    s: Vec<f64>,
    tanh: Vec<f64>,
    scale_tape: Tape,
    translate_tape: Tape,
}

impl Coupling {
    fn masked(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(&self.mask)
            .map(|(v, &m)| if m { *v } else { 0.0 })
            .collect()
    }

    /// Returns `(s, t)` with `s` already bounded.
    fn shift_scale(&self, u: &[f64], bound: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let xm = self.masked(u);
        let raw = self.scale.eval(&xm)?;
        let t = self.translate.eval(&xm)?;
        Ok((raw.iter().map(|r| bound * r.tanh()).collect(), t))
    }
}

impl FlowModel {
    /// Flow whose couplings start as the identity (zeroed output layers).
    pub fn new(dim: usize, mean: Vec<f64>, std: Vec<f64>, cfg: &FlowConfig, rng: &mut IclRng) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Config("coupling flows need at least 2 features".into()));
        }
        if mean.len() != dim || std.len() != dim {
            return Err(Error::dim("flow standardization", dim, mean.len().min(std.len())));
        }
        if cfg.coupling_layers == 0 {
            return Err(Error::Config("flow needs at least one coupling layer".into()));
        }
        let mut sizes = vec![dim];
        sizes.extend_from_slice(&cfg.hidden);
        sizes.push(dim);
        let mut couplings = Vec::with_capacity(cfg.coupling_layers);
        for k in 0..cfg.coupling_layers {
            // even layers condition on even coordinates, odd layers on odd ones
            let mask = (0..dim).map(|i| i % 2 == k % 2).collect();
            couplings.push(Coupling {
                mask,
                scale: MlpParams::new(&sizes, Activation::Relu, Activation::Identity, 0.0, rng)?,
                translate: MlpParams::new(&sizes, Activation::Relu, Activation::Identity, 0.0, rng)?,
            });
        }
        Ok(FlowModel {
            couplings,
            mean,
            std,
            scale_bound: cfg.scale_bound,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::dim("flow input", self.dim(), x.len()));
        }
        Ok(())
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    fn log_std_sum(&self) -> f64 {
        self.std.iter().map(|s| s.ln()).sum()
    }

    /// Data → latent. Returns `(z, log|det ∂z/∂x|)` including the standardization.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check_point(x)?;
        let mut u = self.standardize(x);
        let mut logdet = -self.log_std_sum();
        for c in &self.couplings {
            let (s, t) = c.shift_scale(&u, self.scale_bound)?;
            for j in 0..u.len() {
                if !c.mask[j] {
                    u[j] = u[j] * s[j].exp() + t[j];
                    logdet += s[j];
                }
            }
        }
        Ok((u, logdet))
    }

    /// Latent → data. Returns `(x, log|det ∂x/∂z|)`.
    pub fn inverse(&self, z: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check_point(z)?;
        let mut u = z.to_vec();
        let mut logdet = self.log_std_sum();
        for c in self.couplings.iter().rev() {
            // masked coordinates are unchanged by this coupling, so s and t can
            // be recomputed from the output side
            let (s, t) = c.shift_scale(&u, self.scale_bound)?;
            for j in 0..u.len() {
                if !c.mask[j] {
                    u[j] = (u[j] - t[j]) * (-s[j]).exp();
                    logdet -= s[j];
                }
            }
        }
        let x = u
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s + m)
            .collect();
        Ok((x, logdet))
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        let (z, logdet) = self.forward(x)?;
        let lp = standard_normal_log_pdf(&z) + logdet;
        if !lp.is_finite() {
            return Err(Error::NonFinite(format!("log-density at {x:?}")));
        }
        Ok(lp)
    }

    pub fn nll(&self, x: &[f64]) -> Result<f64> {
        Ok(-self.log_density(x)?)
    }

    /// Negative log-density of one (already standardized) point, accumulating
    /// `scale · ∂nll/∂θ` into `grads` (two buffers per coupling: scale, translate).
    fn nll_grad_standardized(&self, u0: &[f64], scale: f64, grads: &mut [(GradBuffer, GradBuffer)]) -> Result<f64> {
        let bound = self.scale_bound;
        let mut u = u0.to_vec();
        let mut logdet = 0.0;
        let mut traces = Vec::with_capacity(self.couplings.len());
        for c in &self.couplings {
            let xm = c.masked(&u);
            let (raw, scale_tape) = c.scale.forward(&xm)?;
            let (t, translate_tape) = c.translate.forward(&xm)?;
            let tanh: Vec<f64> = raw.iter().map(|r| r.tanh()).collect();
            let s: Vec<f64> = tanh.iter().map(|v| bound * v).collect();
            let input = u.clone();
            for j in 0..u.len() {
                if !c.mask[j] {
                    u[j] = u[j] * s[j].exp() + t[j];
                    logdet += s[j];
                }
            }
            traces.push(CouplingTrace {
                input,
                s,
                tanh,
                scale_tape,
                translate_tape,
            });
        }
        let nll = -(standard_normal_log_pdf(&u) + logdet - self.log_std_sum());

        let d = u.len();
        let mut g = u; // ∂nll/∂z = z
        for (k, c) in self.couplings.iter().enumerate().rev() {
            let tr = &traces[k];
            let mut g_in = vec![0.0; d];
            let mut g_raw = vec![0.0; d];
            let mut g_t = vec![0.0; d];
            for j in 0..d {
                if c.mask[j] {
                    g_in[j] = g[j];
                } else {
                    let es = tr.s[j].exp();
                    g_in[j] = g[j] * es;
                    let g_s = g[j] * tr.input[j] * es - 1.0;
                    g_raw[j] = g_s * bound * (1.0 - tr.tanh[j] * tr.tanh[j]);
                    g_t[j] = g[j];
                }
            }
            let (gs, gt) = &mut grads[k];
            let dxs = c.scale.backward_accumulate(&tr.scale_tape, &g_raw, scale, gs)?;
            let dxt = c.translate.backward_accumulate(&tr.translate_tape, &g_t, scale, gt)?;
            for j in 0..d {
                if c.mask[j] && scale != 0.0 {
                    g_in[j] += (dxs[j] + dxt[j]) / scale;
                }
            }
            g = g_in;
        }
        Ok(nll)
    }

    /// Gradient of the mean negative log-density over `points` (raw features).
    pub fn nll_gradient(&self, points: &[Vec<f64>]) -> Result<(f64, Vec<(GradBuffer, GradBuffer)>)> {
        if points.is_empty() {
            return Err(Error::Empty("flow gradient points"));
        }
        let mut grads = self.zero_grads();
        let w = 1.0 / points.len() as f64;
        let mut total = 0.0;
        for p in points {
            self.check_point(p)?;
            total += self.nll_grad_standardized(&self.standardize(p), w, &mut grads)?;
        }
        Ok((total * w, grads))
    }

    fn zero_grads(&self) -> Vec<(GradBuffer, GradBuffer)> {
        self.couplings
            .iter()
            .map(|c| (GradBuffer::zeros_like(&c.scale), GradBuffer::zeros_like(&c.translate)))
            .collect()
    }

    /// Mutable access to the coupling networks in gradient order.
    pub fn networks_mut(&mut self) -> impl Iterator<Item = &mut MlpParams> {
        self.couplings
            .iter_mut()
            .flat_map(|c| [&mut c.scale, &mut c.translate])
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
        let f: FlowModel = serde_json::from_str(&text)?;
        for c in &f.couplings {
            c.scale.validate()?;
            c.translate.validate()?;
        }
        Ok(f)
    }
}

pub fn standard_normal_log_pdf(z: &[f64]) -> f64 {
    -0.5 * z.iter().map(|v| v * v).sum::<f64>() - 0.5 * z.len() as f64 * LOG_2PI
}

/// Per-feature mean and standard deviation; zero-variance features get std 1.
pub fn standardization(points: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let first = points.first().ok_or(Error::Empty("flow training points"))?;
    let d = first.len();
    let n = points.len() as f64;
    let mut mean = vec![0.0; d];
    for p in points {
        if p.len() != d {
            return Err(Error::dim("flow training point", d, p.len()));
        }
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v / n;
        }
    }
    let mut std = vec![0.0; d];
    for p in points {
        for j in 0..d {
            std[j] += (p[j] - mean[j]).powi(2) / n;
        }
    }
    for (j, s) in std.iter_mut().enumerate() {
        *s = s.sqrt();
        if *s < 1e-12 {
            log::warn!("flow feature {j} has zero variance; using std 1");
            *s = 1.0;
        }
    }
    Ok((mean, std))
}

/// Fit by minibatch maximum likelihood. `discrete[j]` marks features that get
/// dequantization noise during fitting.
pub fn fit(points: &[Vec<f64>], discrete: &[bool], cfg: &FlowConfig, rng: &mut IclRng) -> Result<FlowModel> {
    let (mean, std) = standardization(points)?;
    let dim = mean.len();
    if discrete.len() != dim {
        return Err(Error::dim("discrete feature flags", dim, discrete.len()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("flow batch size must be positive".into()));
    }
    let mut flow = FlowModel::new(dim, mean, std, cfg, rng)?;
    let mut opts: Vec<Optimizer> = (0..2 * flow.couplings.len())
        .map(|_| Optimizer::adam(cfg.lr))
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..points.len()).collect();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            for &i in chunk {
                let mut p = points[i].clone();
                for j in 0..dim {
                    if discrete[j] && cfg.dequantization > 0.0 {
                        p[j] += rng.random_range(-cfg.dequantization..cfg.dequantization);
                    }
                }
                batch.push(p);
            }
            let (_, grads) = flow.nll_gradient(&batch)?;
            let flat_grads = grads.iter().flat_map(|(a, b)| [a, b]);
            for ((net, opt), g) in flow.networks_mut().zip(opts.iter_mut()).zip(flat_grads) {
                opt.step(net, g)?;
            }
        }
    }
    Ok(flow)
}

pub fn nll_stats(flow: &FlowModel, points: &[Vec<f64>]) -> Result<ExpertNllStats> {
    if points.is_empty() {
        return Err(Error::Empty("expert points"));
    }
    let nll: Vec<f64> = points.iter().map(|p| flow.nll(p)).collect::<Result<_>>()?;
    Ok(mean_std(&nll))
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> ExpertNllStats {
    let n = values.len() as f64;
    let mu = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    ExpertNllStats { mu, sigma: var.sqrt() }
}

/// Fraction of the trajectory's points whose NLL exceeds `μ_E + σ_E`.
pub fn trajectory_weight(flow: &FlowModel, stats: &ExpertNllStats, points: &[Vec<f64>]) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::Empty("trajectory"));
    }
    let nll: Vec<f64> = points.iter().map(|p| flow.nll(p)).collect::<Result<_>>()?;
    Ok(weight_from_nll(&nll, stats))
}

pub fn weight_from_nll(nll: &[f64], stats: &ExpertNllStats) -> f64 {
    let thr = stats.threshold();
    nll.iter().filter(|v| **v > thr).count() as f64 / nll.len() as f64
}
