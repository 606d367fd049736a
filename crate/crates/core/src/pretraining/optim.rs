use crate::params::Params;
use crate::scalar::Real;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to `*.w` matrices only.
    pub weight_decay: f64,
    /// Length of the cosine schedule; 0 keeps the rate constant.
    pub total_steps: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            total_steps: 0,
        }
    }
}

impl OptimConfig {
    /// Cosine decay from `lr` to zero over `total_steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.lr;
        }
        let frac = step.min(self.total_steps) as f64 / self.total_steps as f64;
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: OptimConfig,
    pub step: usize,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
    decay: Vec<bool>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: OptimConfig, params: &Params<T>) -> Self {
        Self {
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
            decay: params.iter().map(|(_, n, _)| n.ends_with(".w")).collect(),
        }
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr_at(self.step)
    }

    /// One update. `trainable[i] == false` leaves parameter `i` untouched.
    /// Returns the learning rate used.
    pub fn apply(&mut self, params: &mut Params<T>, grads: &[Matrix<T>], trainable: Option<&[bool]>) -> f64 {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        let c = &self.config;
        let lr = c.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one, eps) = (T::one(), T::of(c.eps));
        let step_size = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            if trainable.is_some_and(|t| !t[i]) {
                continue;
            }
            let p = params.get_mut(id);
            if self.decay[i] && c.weight_decay > 0.0 {
                p.scale_assign(T::of(1.0 - lr * c.weight_decay));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &g), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(grads[i].data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (one - b1) * g;
                *vi = b2 * *vi + (one - b2) * g * g;
                *w -= step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
        lr
    }
}
