use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamGroup, ParamStore};
use super::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr_backbone: f64,
    pub lr_transformer: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr_backbone: 1e-5,
            lr_transformer: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Backbone => self.lr_backbone,
            ParamGroup::Transformer => self.lr_transformer,
        }
    }
}

/// Multiplies every learning rate by `factor` once per `every` completed steps.
/// `every = 0` disables the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    pub every: u64,
    pub factor: f64,
}

impl Default for StepDecay {
    fn default() -> Self {
        Self { every: 0, factor: 0.1 }
    }
}

impl StepDecay {
    pub fn multiplier(&self, step: u64) -> f64 {
        step.checked_div(self.every).map_or(1.0, |k| self.factor.powi(k as i32))
    }
}

/// AdamW with decoupled weight decay: `p ← p·(1 − lr·wd)` is applied before
/// the bias-corrected adaptive step. Moments are kept in 64-bit.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub schedule: StepDecay,
    pub(crate) m: Vec<Vec<f64>>,
    pub(crate) v: Vec<Vec<f64>>,
    pub(crate) step: u64,
}

impl AdamW {
    pub fn new<T: Scalar>(store: &ParamStore<T>, config: AdamWConfig, schedule: StepDecay) -> Self {
        let zeros: Vec<Vec<f64>> = store.entries().iter().map(|e| vec![0.0; e.tensor.numel()]).collect();
        Self {
            config,
            schedule,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// Restores state saved alongside a checkpoint. Shapes must match the
    /// store the optimizer was built for.
    pub fn restore(&mut self, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>, step: u64) -> bool {
        let same = |a: &[Vec<f64>], b: &[Vec<f64>]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.len() == y.len());
        if !same(&m, &self.m) || !same(&v, &self.v) {
            return false;
        }
        self.m = m;
        self.v = v;
        self.step = step;
        true
    }

    pub fn current_lr(&self, group: ParamGroup) -> f64 {
        self.config.lr(group) * self.schedule.multiplier(self.step)
    }

    pub fn update<T: Scalar>(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) {
        let c = self.config;
        let decay = self.schedule.multiplier(self.step);
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let lr = c.lr(store.group(id)) * decay;
            let g = grads.get(id);
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g[i].as_f64();
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mut w = p[i].as_f64() * (1.0 - lr * c.weight_decay);
                w -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                p[i] = T::of(w);
            }
        }
    }
}
