use super::matrix::Matrix;
use super::params::{ParamGrads, ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the whole gradient when its global norm exceeds this value.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

/// Learning-rate multiplier for 1-based `step` of `total`: linear warmup over
/// `warmup` steps, then linear decay that reaches `1 / (total - warmup)` on
/// the last step.
pub fn warmup_linear_decay(step: usize, warmup: usize, total: usize) -> f64 {
    let step = step.clamp(1, total.max(1));
    if step <= warmup {
        return step as f64 / warmup as f64;
    }
    (total - step + 1) as f64 / (total - warmup) as f64
}

/// Adam with optional per-tensor learning-rate multipliers.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    lr_scale: Vec<f64>,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    step: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|(_, m)| Matrix::zeros(m.rows(), m.cols())).collect();
        Self {
            config,
            lr_scale: vec![1.0; store.len()],
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// Multiplies the learning rate of one tensor by `factor`.
    pub fn set_lr_scale(&mut self, id: ParamId, factor: f64) {
        self.lr_scale[id.index()] = factor;
    }

    pub fn lr_scale(&self, id: ParamId) -> f64 {
        self.lr_scale[id.index()]
    }

    /// Changes the base learning rate, e.g. for a warmup schedule.
    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Effective learning rate for a tensor.
    pub fn lr_for(&self, id: ParamId) -> f64 {
        self.config.lr * self.lr_scale[id.index()]
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) {
        self.step += 1;
        let clip = match self.config.clip_norm {
            Some(max) => {
                let norm = grads.global_norm();
                if norm > max { max / norm } else { 1.0 }
            }
            None => 1.0,
        };
        let AdamConfig { lr, beta1, beta2, eps, .. } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let i = id.index();
            let step_lr = lr * self.lr_scale[i];
            let g = grads.values()[i].as_slice();
            let m = self.m[i].as_mut_slice();
            let v = self.v[i].as_mut_slice();
            let p = store.get_mut(id).as_mut_slice();
            for k in 0..p.len() {
                let gk = g[k] * clip;
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                p[k] -= step_lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tape::Tape;

    #[test]
    fn schedule_shape() {
        let f: Vec<f64> = (1..=6).map(|s| warmup_linear_decay(s, 2, 6)).collect();
        assert_eq!(f, [0.5, 1.0, 1.0, 0.75, 0.5, 0.25]);
        assert_eq!(warmup_linear_decay(1, 0, 1), 1.0);
        assert_eq!(warmup_linear_decay(3, 5, 3), 0.6);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Matrix::row_vector(vec![3.0, -2.0]));
        let mut opt = Adam::new(&store, AdamConfig { lr: 0.1, clip_norm: None, ..Default::default() });
        for _ in 0..500 {
            let grads = {
                let tape = Tape::new();
                let vars = store.register(&tape);
                let x = vars.var(id);
                let sq = tape.mul(x, x);
                let loss = tape.sum(sq);
                let g = tape.backward(loss);
                vars.gradients(&store, g)
            };
            opt.step(&mut store, &grads);
        }
        assert!(store.get(id).as_slice().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn lr_scale_is_exact() {
        let mut store = ParamStore::new();
        let a = store.add("a", Matrix::zeros(1, 1));
        let b = store.add("b", Matrix::zeros(1, 1));
        let mut opt = Adam::new(&store, AdamConfig { lr: 1e-5, ..Default::default() });
        opt.set_lr_scale(b, 1e3);
        assert_eq!(opt.lr_scale(b) / opt.lr_scale(a), 1000.0);
        assert!((opt.lr_for(b) - 1e-2).abs() < 1e-15);
    }
}
