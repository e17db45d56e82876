use serde::{Deserialize, Serialize};

use super::{GradBuffer, MlpParams};
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptKind {
    Sgd,
    Adam,
}

/// First-order optimizer state for one network.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptKind,
    pub lr: f64,
    pub steps: u64,
    m: Option<GradBuffer>,
    v: Option<GradBuffer>,
}

impl Optimizer {
    pub fn new(kind: OptKind, lr: f64) -> Result<Self> {
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::Config(format!("learning rate {lr} must be finite and ≥ 0")));
        }
        Ok(Optimizer {
            kind,
            lr,
            steps: 0,
            m: None,
            v: None,
        })
    }

    pub fn sgd(lr: f64) -> Result<Self> {
        Self::new(OptKind::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Result<Self> {
        Self::new(OptKind::Adam, lr)
    }

    /// Descend along `grads`. Non-finite gradients are rejected and leave
    /// both the parameters and the optimizer untouched.
    pub fn step(&mut self, params: &mut MlpParams, grads: &GradBuffer) -> Result<()> {
        if !grads.congruent_with(params) {
            return Err(Error::Config("gradient shape does not match parameters".into()));
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient (norm {:.3e}) passed to optimizer step {}",
                grads.norm(),
                self.steps
            )));
        }
        self.steps += 1;
        match self.kind {
            OptKind::Sgd => {
                for (l, (gw, gb)) in params.layers.iter_mut().zip(&grads.layers) {
                    for (p, g) in l.weights.iter_mut().zip(gw).chain(l.bias.iter_mut().zip(gb)) {
                        *p -= self.lr * g;
                    }
                }
            }
            OptKind::Adam => {
                let m = self.m.get_or_insert_with(|| GradBuffer::zeros_like(params));
                let v = self.v.get_or_insert_with(|| GradBuffer::zeros_like(params));
                let t = self.steps as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                let lr = self.lr;
                for (li, l) in params.layers.iter_mut().enumerate() {
                    let (gw, gb) = &grads.layers[li];
                    let (mw, mb) = &mut m.layers[li];
                    let (vw, vb) = &mut v.layers[li];
                    adam_update(&mut l.weights, gw, mw, vw, lr, c1, c2);
                    adam_update(&mut l.bias, gb, mb, vb, lr, c1, c2);
                }
            }
        }
        Ok(())
    }
}

fn adam_update(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], lr: f64, c1: f64, c2: f64) {
    for i in 0..p.len() {
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
        let mhat = m[i] / c1;
        let vhat = v[i] / c2;
        p[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Layer};

    fn scalar_net(p: f64) -> MlpParams {
        MlpParams::from_layers(vec![Layer {
            inputs: 1,
            outputs: 1,
            activation: Activation::Identity,
            weights: vec![p],
            bias: vec![0.0],
        }])
        .unwrap()
    }

    fn grad(g: f64) -> GradBuffer {
        GradBuffer {
            layers: vec![(vec![g], vec![0.0])],
        }
    }

    #[test]
    fn sgd_step() {
        let mut net = scalar_net(1.0);
        let mut opt = Optimizer::sgd(0.1).unwrap();
        opt.step(&mut net, &grad(2.0)).unwrap();
        assert!((net.layers[0].weights[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g|+ε).
        for g in [0.5, 3.0, 100.0] {
            let mut net = scalar_net(1.0);
            let mut opt = Optimizer::adam(1e-3).unwrap();
            opt.step(&mut net, &grad(g)).unwrap();
            let expected = 1.0 - 1e-3 * g / (g + ADAM_EPS);
            assert!((net.layers[0].weights[0] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_gradient_keeps_params_and_counts_step() {
        for kind in [OptKind::Sgd, OptKind::Adam] {
            let mut net = scalar_net(0.7);
            let mut opt = Optimizer::new(kind, 0.1).unwrap();
            opt.step(&mut net, &grad(0.0)).unwrap();
            assert_eq!(net.layers[0].weights[0], 0.7);
            assert_eq!(opt.steps, 1);
        }
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        for kind in [OptKind::Sgd, OptKind::Adam] {
            let mut net = scalar_net(0.7);
            let mut opt = Optimizer::new(kind, 0.0).unwrap();
            for _ in 0..3 {
                opt.step(&mut net, &grad(5.0)).unwrap();
            }
            assert_eq!(net.layers[0].weights[0], 0.7);
        }
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut net = scalar_net(0.7);
        let mut opt = Optimizer::adam(0.1).unwrap();
        assert!(matches!(opt.step(&mut net, &grad(f64::NAN)), Err(Error::NonFinite(_))));
        assert_eq!(net.layers[0].weights[0], 0.7);
        assert_eq!(opt.steps, 0);
    }

    #[test]
    fn negative_learning_rate_rejected() {
        assert!(Optimizer::sgd(-1.0).is_err());
    }
}
