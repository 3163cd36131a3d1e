//! Adaptive moment estimation.

use std::collections::BTreeMap;

use crate::params::{round_to_f32, ParamSet};
use crate::tape::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam state. Moments are kept at `f32` precision like the parameters so a
/// saved optimizer resumes bit-exactly.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    /// First moments by parameter name.
    pub m: ParamSet,
    /// Second moments by parameter name.
    pub v: ParamSet,
    /// Per-parameter update counts (parameters may join late).
    pub t: BTreeMap<String, u64>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            ..Default::default()
        }
    }

    /// Applies one update; `lr` gives the learning rate per parameter name.
    /// Parameters without a gradient are left untouched.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &BTreeMap<String, Tensor>,
        lr: impl Fn(&str) -> f64,
    ) {
        let AdamConfig { beta1, beta2, eps } = self.config;
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            if !self.m.contains(name) {
                self.m.insert(name.clone(), Tensor::zeros(p.raw_dim()));
                self.v.insert(name.clone(), Tensor::zeros(p.raw_dim()));
            }
            let t = self.t.entry(name.clone()).or_insert(0);
            *t += 1;
            let bc1 = 1.0 - beta1.powi(*t as i32);
            let bc2 = 1.0 - beta2.powi(*t as i32);
            let rate = lr(name);
            let m = self.m.get_mut(name).expect("moment");
            ndarray::Zip::from(&mut *m)
                .and(g)
                .for_each(|m, &g| *m = beta1 * *m + (1.0 - beta1) * g);
            round_to_f32(m);
            let v = self.v.get_mut(name).expect("moment");
            ndarray::Zip::from(&mut *v)
                .and(g)
                .for_each(|v, &g| *v = beta2 * *v + (1.0 - beta2) * g * g);
            round_to_f32(v);
            let m = self.m.get(name).expect("moment");
            let v = self.v.get(name).expect("moment");
            if rate != 0.0 {
                ndarray::Zip::from(&mut *p)
                    .and(m)
                    .and(v)
                    .for_each(|p, &m, &v| {
                        let step = rate * (m / bc1) / ((v / bc2).sqrt() + eps);
                        *p = (*p - step) as f32 as f64;
                    });
            }
        }
    }
}
