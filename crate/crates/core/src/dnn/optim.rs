//! ADAM and the reduce-on-plateau learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::mlp::{Gradients, Mlp, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub config: AdamConfig,
    pub t: u64,
    m: Gradients<F>,
    v: Gradients<F>,
}

impl<F: Real> Adam<F> {
    pub fn new(config: AdamConfig, mlp: &Mlp<F>) -> Self {
        Adam {
            config,
            t: 0,
            m: Gradients::zeros_like(mlp),
            v: Gradients::zeros_like(mlp),
        }
    }

    /// One bias-corrected ADAM update of every parameter.
    pub fn step(&mut self, mlp: &mut Mlp<F>, g: &Gradients<F>, lr: f64) {
        self.t += 1;
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        let (b1, b2, eps) = (F::of(beta1), F::of(beta2), F::of(epsilon));
        let (one_b1, one_b2) = (F::of(1.0 - beta1), F::of(1.0 - beta2));
        let (lr_t, inv_c2_sqrt) = (F::of(lr / c1), F::of(1.0 / c2.sqrt()));
        let update = |p: &mut F, g: F, m: &mut F, v: &mut F| {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            *p -= lr_t * *m / (v.sqrt() * inv_c2_sqrt + eps);
        };
        for (l, layer) in mlp.layers.iter_mut().enumerate() {
            ndarray::Zip::from(&mut layer.w)
                .and(&g.w[l])
                .and(&mut self.m.w[l])
                .and(&mut self.v.w[l])
                .for_each(|p, &g, m, v| update(p, g, m, v));
            ndarray::Zip::from(&mut layer.b)
                .and(&g.b[l])
                .and(&mut self.m.b[l])
                .and(&mut self.v.b[l])
                .for_each(|p, &g, m, v| update(p, g, m, v));
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            factor: 0.5,
            patience: 10,
            min_lr: 1e-4,
        }
    }
}

/// Multiplies the rate by `factor` once `patience` consecutive epochs pass
/// without a strict improvement of the monitored loss.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    pub config: PlateauConfig,
    pub lr: f64,
    best: f64,
    wait: usize,
}

impl PlateauScheduler {
    pub fn new(config: PlateauConfig, lr: f64) -> Self {
        PlateauScheduler {
            config,
            lr,
            best: f64::INFINITY,
            wait: 0,
        }
    }

    /// Record one epoch's loss; returns the rate for the next epoch.
    pub fn observe(&mut self, loss: f64) -> f64 {
        if loss < self.best {
            self.best = loss;
            self.wait = 0;
        } else {
            self.wait += 1;
            if self.wait >= self.config.patience {
                self.lr = (self.lr * self.config.factor).max(self.config.min_lr);
                self.wait = 0;
            }
        }
        self.lr
    }
}
