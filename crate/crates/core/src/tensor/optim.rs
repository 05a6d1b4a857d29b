use std::collections::HashMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant,
    /// Cosine warm-up from `lr / div_factor` to `lr` over the first
    /// `pct_start` of `total_steps`, then cosine decay to
    /// `lr / (div_factor · final_div_factor)`.
    OneCycle {
        total_steps: usize,
        pct_start: f64,
        div_factor: f64,
        final_div_factor: f64,
    },
}

impl LrSchedule {
    pub fn lr_at(&self, base: f64, step: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::OneCycle {
                total_steps,
                pct_start,
                div_factor,
                final_div_factor,
            } => {
                let cos_interp = |from: f64, to: f64, frac: f64| to + (from - to) * 0.5 * (1.0 + (PI * frac).cos());
                let start = base / div_factor;
                let end = start / final_div_factor;
                let warm = ((total_steps as f64) * pct_start).max(1.0);
                let s = step as f64;
                if s < warm {
                    cos_interp(start, base, s / warm)
                } else {
                    let rest = (total_steps as f64 - warm).max(1.0);
                    cos_interp(base, end, ((s - warm) / rest).min(1.0))
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    /// First-moment decay ("momentum").
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied as `p -= lr · wd · p`.
    pub weight_decay: f64,
    pub schedule: LrSchedule,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.003,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.01,
            schedule: LrSchedule::Constant,
        }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    step: usize,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.cfg.schedule.lr_at(self.cfg.lr, self.step)
    }

    /// Applies one update to every parameter that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for (name, grad) in grads.params() {
            let Some(grad) = grad else { continue };
            let param: &mut Tensor = store
                .get_mut(name)
                .ok_or_else(|| Error::Invalid(format!("gradient for unknown parameter `{name}`")))?;
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; grad.numel()], vec![0.0; grad.numel()]));
            for (((p, g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + self.cfg.eps);
                *p -= lr * (update + self.cfg.weight_decay * *p);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    #[test]
    fn one_cycle_peaks_at_base_lr() {
        let s = LrSchedule::OneCycle {
            total_steps: 100,
            pct_start: 0.4,
            div_factor: 10.0,
            final_div_factor: 1e4,
        };
        assert!((s.lr_at(0.003, 0) - 0.0003).abs() < 1e-15);
        assert!((s.lr_at(0.003, 40) - 0.003).abs() < 1e-15);
        assert!((s.lr_at(0.003, 100) - 0.0003 / 1e4).abs() < 1e-15);
        assert!(s.lr_at(0.003, 20) < 0.003 && s.lr_at(0.003, 70) < 0.003);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::new(&[2], vec![3.0, -2.0]).unwrap());
        let mut opt = Adam::new(AdamConfig {
            lr: 0.05,
            weight_decay: 0.0,
            ..AdamConfig::default()
        });
        for _ in 0..500 {
            let mut g = Graph::with_params(&store);
            let x = g.param("x").unwrap();
            let sq = g.mul(x, x).unwrap();
            let loss = g.sum(sq);
            let grads = g.backward(loss).unwrap();
            opt.step(&mut store, &grads).unwrap();
        }
        assert!(store.get("x").unwrap().max_abs() < 1e-2);
    }
}
