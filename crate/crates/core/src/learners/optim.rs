//! First-order optimizers over a flat parameter vector. Weight decay is
//! decoupled from the gradient (applied directly to the weights).

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerSpec {
    /// Rectified Adam.
    RAdam { lr: f64, weight_decay: f64 },
    Sgd {
        lr: f64,
        momentum: f64,
        nesterov: bool,
        weight_decay: f64,
    },
}

impl OptimizerSpec {
    pub fn radam() -> Self {
        OptimizerSpec::RAdam {
            lr: 0.001,
            weight_decay: 0.001,
        }
    }

    pub fn nesterov_sgd() -> Self {
        OptimizerSpec::Sgd {
            lr: 0.001,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 0.001,
        }
    }

    pub fn lr(&self) -> f64 {
        match self {
            OptimizerSpec::RAdam { lr, .. } | OptimizerSpec::Sgd { lr, .. } => *lr,
        }
    }

    pub fn with_lr(&self, new_lr: f64) -> Self {
        let mut s = self.clone();
        match &mut s {
            OptimizerSpec::RAdam { lr, .. } | OptimizerSpec::Sgd { lr, .. } => *lr = new_lr,
        }
        s
    }
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec::radam()
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

pub struct Optimizer {
    spec: OptimizerSpec,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Optimizer {
    pub fn new(spec: OptimizerSpec, n_params: usize) -> Self {
        Optimizer {
            spec,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        match self.spec {
            OptimizerSpec::RAdam { lr, weight_decay } => {
                let t = self.t as f64;
                let b1t = BETA1.powf(t);
                let b2t = BETA2.powf(t);
                let rho_inf = 2.0 / (1.0 - BETA2) - 1.0;
                let rho_t = rho_inf - 2.0 * t * b2t / (1.0 - b2t);
                let rect = (rho_t > 5.0).then(|| {
                    ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt()
                });
                for i in 0..params.len() {
                    params[i] *= 1.0 - lr * weight_decay;
                    let g = grads[i];
                    self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
                    self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
                    let m_hat = self.m[i] / (1.0 - b1t);
                    params[i] -= match rect {
                        Some(r) => {
                            let adapt = (1.0 - b2t).sqrt() / (self.v[i].sqrt() + EPS);
                            lr * m_hat * r * adapt
                        }
                        None => lr * m_hat,
                    };
                }
            }
            OptimizerSpec::Sgd {
                lr,
                momentum,
                nesterov,
                weight_decay,
            } => {
                for i in 0..params.len() {
                    params[i] *= 1.0 - lr * weight_decay;
                    let g = grads[i];
                    let buf = if self.t == 1 { g } else { momentum * self.m[i] + g };
                    self.m[i] = buf;
                    let update = if nesterov { g + momentum * buf } else { buf };
                    params[i] -= lr * update;
                }
            }
        }
    }
}
