//! First-order optimizers: plain SGD, SGD with momentum, and Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl OptimizerKind {
    /// Adam with β1 = 0.9, β2 = 0.999, eps = 1e-8.
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }
}

/// Optimizer choice and learning rate. In JSON this is one flat object,
/// e.g. `{"kind": "adam", "lr": 0.001}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "OptimizerFile", into = "OptimizerFile")]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
}

#[derive(Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
enum OptimizerFile {
    Sgd {
        lr: f64,
    },
    SgdMomentum {
        lr: f64,
        momentum: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

impl From<OptimizerFile> for OptimizerConfig {
    fn from(f: OptimizerFile) -> Self {
        match f {
            OptimizerFile::Sgd { lr } => Self::sgd(lr),
            OptimizerFile::SgdMomentum { lr, momentum } => Self::momentum(lr, momentum),
            OptimizerFile::Adam { lr, beta1, beta2, eps } => Self {
                kind: OptimizerKind::Adam { beta1, beta2, eps },
                lr,
            },
        }
    }
}

impl From<OptimizerConfig> for OptimizerFile {
    fn from(c: OptimizerConfig) -> Self {
        let lr = c.lr;
        match c.kind {
            OptimizerKind::Sgd => OptimizerFile::Sgd { lr },
            OptimizerKind::SgdMomentum { momentum } => OptimizerFile::SgdMomentum { lr, momentum },
            OptimizerKind::Adam { beta1, beta2, eps } => OptimizerFile::Adam { lr, beta1, beta2, eps },
        }
    }
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::adam(),
            lr,
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
        }
    }

    pub fn momentum(lr: f64, momentum: f64) -> Self {
        Self {
            kind: OptimizerKind::SgdMomentum { momentum },
            lr,
        }
    }
}

/// Per-parameter optimizer state.
#[derive(Clone, Debug)]
pub struct OptimState {
    config: OptimizerConfig,
    ascent: bool,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl OptimState {
    /// Fresh state for descent on the given parameter shapes.
    pub fn new(config: OptimizerConfig, params: &[Tensor]) -> Self {
        let zeros = |on: bool| {
            if on {
                params.iter().map(|p| Tensor::zeros(p.dims())).collect()
            } else {
                Vec::new()
            }
        };
        let (first, second) = match config.kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::SgdMomentum { .. } => (zeros(true), Vec::new()),
            OptimizerKind::Adam { .. } => (zeros(true), zeros(true)),
        };
        Self {
            config,
            ascent: false,
            step: 0,
            first,
            second,
        }
    }

    /// Same as [`OptimState::new`] but maximizing: every step is negated.
    pub fn ascending(config: OptimizerConfig, params: &[Tensor]) -> Self {
        Self {
            ascent: true,
            ..Self::new(config, params)
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Apply one update. Every parameter needs a gradient of identical dims.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<&Tensor>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::contract(format!(
                "{} gradients supplied for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let g = g.ok_or_else(|| Error::contract(format!("missing gradient for parameter {i}")))?;
            p.same_dims(g)?;
        }
        self.step += 1;
        let lr = if self.ascent { -self.config.lr } else { self.config.lr };
        let grads = grads.iter().map(|g| g.expect("checked above"));
        match self.config.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= lr * gv;
                    }
                }
            }
            OptimizerKind::SgdMomentum { momentum } => {
                for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                        *vv = momentum * *vv + gv;
                        *pv -= lr * *vv;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let bias1 = 1.0 - beta1.powi(t);
                let bias2_sqrt = (1.0 - beta2.powi(t)).sqrt();
                let step_size = lr / bias1;
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
                    let it = p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut());
                    for (((pv, &gv), mv), vv) in it {
                        *mv = beta1 * *mv + (1.0 - beta1) * gv;
                        *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                        let denom = vv.sqrt() / bias2_sqrt + eps;
                        *pv -= step_size * *mv / denom;
                    }
                }
            }
        }
        Ok(())
    }
}
