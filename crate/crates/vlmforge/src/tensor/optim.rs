//! AdamW-style optimizer with a linear warmup / linear decay schedule.

use std::collections::BTreeMap;

use super::Parameters;

/// Optimizer hyperparameters. The moment constants and epsilon follow the
/// usual large-scale pre-training recipe (beta2 = 0.98); weight decay is
/// decoupled from the gradient (AdamW).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Steps of linear warmup from 0 to `lr` (0 disables warmup).
    pub warmup_steps: u64,
    /// Steps of linear decay from `lr` back to 0 after warmup (0 keeps `lr`
    /// constant after warmup).
    pub decay_steps: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 0,
            decay_steps: 0,
        }
    }
}

/// Decoupled-weight-decay Adam over a [`Parameters`] set. First- and
/// second-moment buffers are keyed by parameter name so optimizer state can be
/// checkpointed and restored independently of construction order.
pub struct AdamW {
    pub cfg: OptimConfig,
    pub(crate) step_count: u64,
    pub(crate) m: BTreeMap<String, Vec<f64>>,
    pub(crate) v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: OptimConfig) -> Self {
        AdamW {
            cfg,
            step_count: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step_count
    }

    /// Learning rate at 1-based step `t` under the warmup/decay schedule.
    pub fn lr_at(&self, t: u64) -> f64 {
        let c = &self.cfg;
        if c.warmup_steps > 0 && t <= c.warmup_steps {
            return c.lr * t as f64 / c.warmup_steps as f64;
        }
        if c.decay_steps > 0 {
            let past = (t - c.warmup_steps) as f64;
            return c.lr * (1.0 - past / c.decay_steps as f64).max(0.0);
        }
        c.lr
    }

    /// Applies one update from the gradients currently held in `params`.
    /// Parameters with no gradient (never touched by the last backward) are
    /// decayed but receive no Adam step with a zero gradient — i.e. they are
    /// treated as gradient zero, which keeps step counts aligned across tasks
    /// that touch different parameter subsets.
    pub fn step(&mut self, params: &mut Parameters) {
        self.step_count += 1;
        let lr = self.lr_at(self.step_count);
        let c = self.cfg.clone();
        let bc1 = 1.0 - c.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step_count as i32);
        for (name, p) in params.iter() {
            let n = p.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            assert_eq!(m.len(), n, "optimizer: state/parameter shape mismatch for {name}");
            let grad = p.grad().unwrap_or_else(|| vec![0.0; n]);
            let mut data = p.value();
            for i in 0..n {
                let g = grad[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * data[i]);
            }
            p.set_data(&data);
        }
        params.version += 1;
    }

    /// Restores moment buffers and step count (checkpoint resume).
    pub(crate) fn restore(
        cfg: OptimConfig,
        step_count: u64,
        m: BTreeMap<String, Vec<f64>>,
        v: BTreeMap<String, Vec<f64>>,
    ) -> Self {
        AdamW { cfg, step_count, m, v }
    }
}
