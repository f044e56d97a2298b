use serde::{Deserialize, Serialize};

use crate::cell::CellConfig;
use crate::error::{Error, Result};

use super::Grads;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First-order optimizer over the physical parameters and the network,
/// each group with its own step size.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    theta_lr: f64,
    steps: u64,
    m_theta: Vec<f64>,
    m_net: Vec<f64>,
    v_theta: Vec<f64>,
    v_net: Vec<f64>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, cfg: &CellConfig, lr: f64, theta_lr: f64) -> Self {
        let nt = cfg.model.params.values.len();
        let nn = cfg.net.params().len();
        let second = matches!(kind, OptimizerKind::Adam { .. });
        Self {
            kind,
            lr,
            theta_lr,
            steps: 0,
            m_theta: vec![0.0; nt],
            m_net: vec![0.0; nn],
            v_theta: if second { vec![0.0; nt] } else { Vec::new() },
            v_net: if second { vec![0.0; nn] } else { Vec::new() },
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, cfg: &mut CellConfig, g: &Grads) {
        self.steps += 1;
        let trainable = cfg.model.params.trainable.clone();
        match self.kind {
            OptimizerKind::SgdMomentum { momentum } => {
                let update = |p: &mut f64, m: &mut f64, g: f64, lr: f64| {
                    *m = momentum * *m + g;
                    *p -= lr * *m;
                };
                for (i, p) in cfg.model.params.values.iter_mut().enumerate() {
                    if trainable[i] {
                        update(p, &mut self.m_theta[i], g.theta[i], self.theta_lr);
                    }
                }
                for ((p, m), gi) in cfg.net.params_mut().iter_mut().zip(&mut self.m_net).zip(&g.net) {
                    update(p, m, *gi, self.lr);
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64, lr: f64| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                };
                for (i, p) in cfg.model.params.values.iter_mut().enumerate() {
                    if trainable[i] {
                        update(p, &mut self.m_theta[i], &mut self.v_theta[i], g.theta[i], self.theta_lr);
                    }
                }
                let net = cfg.net.params_mut();
                for i in 0..net.len() {
                    update(&mut net[i], &mut self.m_net[i], &mut self.v_net[i], g.net[i], self.lr);
                }
            }
        }
    }

    /// Moment buffers in a fixed order: first moments (θ, network) then
    /// second moments when the method keeps them.
    pub fn state(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.m_theta);
        out.extend_from_slice(&self.m_net);
        out.extend_from_slice(&self.v_theta);
        out.extend_from_slice(&self.v_net);
        out
    }

    pub fn restore(&mut self, steps: u64, state: &[f64]) -> Result<()> {
        let expected = self.m_theta.len() + self.m_net.len() + self.v_theta.len() + self.v_net.len();
        if state.len() != expected {
            return Err(Error::LengthMismatch { context: "optimizer state", expected, found: state.len() });
        }
        let mut it = state.iter().copied();
        for buf in [&mut self.m_theta, &mut self.m_net, &mut self.v_theta, &mut self.v_net] {
            for v in buf.iter_mut() {
                *v = it.next().expect("length checked");
            }
        }
        self.steps = steps;
        Ok(())
    }
}
