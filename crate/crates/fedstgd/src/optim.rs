//! Adam with L2 regularization and milestone learning-rate decay, applied
//! identically at every client.

use crate::tape::ParamMap;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay_factor: f64,
    pub milestones: Vec<usize>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            decay_factor: 0.3,
            milestones: vec![5, 20, 40, 70, 90],
        }
    }
}

impl AdamConfig {
    /// Learning rate during epoch `epoch` (0-based): the base rate decayed
    /// once per milestone already reached.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let hits = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.lr * self.decay_factor.powi(hits as i32)
    }
}

/// Optimizer state over a named parameter map. Missing gradient entries
/// are treated as zero; weight decay still applies to them.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    m: ParamMap,
    v: ParamMap,
    step: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            m: ParamMap::new(),
            v: ParamMap::new(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamMap, grads: &ParamMap, epoch: usize) {
        self.step += 1;
        let t = self.step as i32;
        let lr = self.cfg.lr_at(epoch);
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for (name, value) in params.iter_mut() {
            let zero = Tensor::zeros(value.dims());
            let grad = grads.get(name).unwrap_or(&zero);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(value.dims()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(value.dims()));
            let mut new_value = Vec::with_capacity(value.len());
            let mut new_m = Vec::with_capacity(value.len());
            let mut new_v = Vec::with_capacity(value.len());
            for i in 0..value.len() {
                let g = grad.data()[i] + self.cfg.weight_decay * value.data()[i];
                let mi = b1 * m.data()[i] + (1.0 - b1) * g;
                let vi = b2 * v.data()[i] + (1.0 - b2) * g * g;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                new_m.push(mi);
                new_v.push(vi);
                new_value.push(value.data()[i] - lr * m_hat / (v_hat.sqrt() + self.cfg.eps));
            }
            *m = Tensor::new(m.dims().to_vec(), new_m).expect("adam m");
            *v = Tensor::new(v.dims().to_vec(), new_v).expect("adam v");
            *value = Tensor::new(value.dims().to_vec(), new_value).expect("adam value");
        }
    }
}
