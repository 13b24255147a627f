//! AdamW with bias correction and decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{DriftError, Result};
use crate::params::{ParamGrads, ParamKind, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Moment estimates over the flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamWState {
    pub fn new(n: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub state: AdamWState,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        Self {
            config,
            state: AdamWState::new(store.flat_len()),
        }
    }

    /// One update at learning rate `lr`. Decay applies only to `Weight` parameters.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr: f64) -> Result<()> {
        let n = store.flat_len();
        if self.state.m.len() != n || self.state.v.len() != n {
            return Err(DriftError::Shape(format!(
                "optimizer state holds {} values, parameters have {n}",
                self.state.m.len()
            )));
        }
        let c = self.config;
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let mut off = 0;
        for id in store.ids().collect::<Vec<_>>() {
            let decay = store.entry(id).kind == ParamKind::Weight;
            let g = grads.get(id).data().to_vec();
            let p = store.get_mut(id).data_mut();
            if g.len() != p.len() {
                return Err(DriftError::Shape("gradient and parameter sizes differ".into()));
            }
            for (k, (pv, gv)) in p.iter_mut().zip(&g).enumerate() {
                let i = off + k;
                self.state.m[i] = c.beta1 * self.state.m[i] + (1.0 - c.beta1) * gv;
                self.state.v[i] = c.beta2 * self.state.v[i] + (1.0 - c.beta2) * gv * gv;
                let mh = self.state.m[i] / bc1;
                let vh = self.state.v[i] / bc2;
                if decay {
                    *pv -= lr * c.weight_decay * *pv;
                }
                *pv -= lr * mh / (vh.sqrt() + c.eps);
            }
            off += g.len();
        }
        Ok(())
    }
}

/// Cosine decay from `lr` to `lr * floor` over `total` steps.
pub fn cosine_lr(lr: f64, step: u64, total: u64, floor: f64) -> f64 {
    if total == 0 {
        return lr;
    }
    let frac = (step.min(total) as f64) / total as f64;
    lr * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}
