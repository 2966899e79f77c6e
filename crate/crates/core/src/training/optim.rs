use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamId, ParamKind, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First-order optimizer with per-parameter state.
///
/// SGD with momentum keeps a velocity `v <- mu v + g; p <- p - lr v`.
/// Adam keeps bias-corrected first and second moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer<T> {
    pub config: OptimizerConfig,
    pub step_count: u64,
    /// Velocity (SGD) or first moment (Adam), indexed by parameter slot.
    first: Vec<Option<Vec<T>>>,
    /// Second moment (Adam only).
    second: Vec<Option<Vec<T>>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(config: OptimizerConfig, params: &ParamStore<T>) -> Result<Self> {
        if !(config.learning_rate >= 0.0 && config.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be >= 0", config.learning_rate)));
        }
        Ok(Optimizer {
            config,
            step_count: 0,
            first: vec![None; params.len()],
            second: vec![None; params.len()],
        })
    }

    /// Applies one update from `(slot, gradient)` pairs; slots without a
    /// gradient are left untouched.
    pub fn step<'g>(&mut self, params: &mut ParamStore<T>, grads: impl IntoIterator<Item = (ParamId, &'g [T])>)
    where
        T: 'g,
    {
        self.step_count += 1;
        let cfg = self.config;
        let lr = cfg.learning_rate;
        let t = self.step_count as f64;
        for (id, g) in grads {
            if params.get(id).kind != ParamKind::Weight {
                continue;
            }
            let p = params.tensor_mut(id).data_mut();
            let m = self.first[id.index()].get_or_insert_with(|| vec![T::zero(); g.len()]);
            match cfg.kind {
                OptimizerKind::SgdMomentum => {
                    let mu = T::of_f64(cfg.momentum);
                    let lr = T::of_f64(lr);
                    for ((p, m), &g) in p.iter_mut().zip(m.iter_mut()).zip(g) {
                        *m = mu * *m + g;
                        *p -= lr * *m;
                    }
                }
                OptimizerKind::Adam => {
                    let v = self.second[id.index()].get_or_insert_with(|| vec![T::zero(); g.len()]);
                    let (b1, b2) = (T::of_f64(cfg.beta1), T::of_f64(cfg.beta2));
                    let one = T::one();
                    let c1 = 1.0 - cfg.beta1.powf(t);
                    let c2 = 1.0 - cfg.beta2.powf(t);
                    let step = T::of_f64(lr * c2.sqrt() / c1);
                    let eps = T::of_f64(cfg.eps * c2.sqrt());
                    for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                        *m = b1 * *m + (one - b1) * g;
                        *v = b2 * *v + (one - b2) * g * g;
                        *p -= step * *m / (v.sqrt() + eps);
                    }
                }
            }
        }
    }

    /// Named state tensors for checkpointing (`optim.m.<param>` etc.).
    pub fn state_tensors(&self, params: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (prefix, slots) in [("optim.m.", &self.first), ("optim.v.", &self.second)] {
            for (id, p) in params.iter() {
                if let Some(s) = &slots[id.index()] {
                    out.push((
                        format!("{prefix}{}", p.name),
                        Tensor::new(p.tensor.shape().to_vec(), s.clone()).expect("state matches parameter"),
                    ));
                }
            }
        }
        out
    }

    /// Restores state written by [`Optimizer::state_tensors`].
    pub fn load_state(&mut self, params: &ParamStore<T>, tensors: &[(String, Tensor<T>)]) -> Result<()> {
        for (name, t) in tensors {
            let (slots, pname) = if let Some(n) = name.strip_prefix("optim.m.") {
                (&mut self.first, n)
            } else if let Some(n) = name.strip_prefix("optim.v.") {
                (&mut self.second, n)
            } else {
                continue;
            };
            let id = params.id(pname).ok_or_else(|| Error::ParamMismatch {
                missing: vec![],
                unexpected: vec![name.clone()],
            })?;
            if params.tensor(id).shape() != t.shape() {
                return Err(Error::shape("optimizer state", params.tensor(id).shape(), t.shape()));
            }
            slots[id.index()] = Some(t.data().to_vec());
        }
        Ok(())
    }
}
