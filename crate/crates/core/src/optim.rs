use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u32,
}

/// Adaptive moments with decoupled weight decay.
///
/// Update for a parameter `p` with gradient `g` at step `t`:
/// `p ← p − lr·(m̂ / (√v̂ + eps) + wd·p)` with bias-corrected `m̂`, `v̂`.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    state: Vec<Option<Moments>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            state: Vec::new(),
        }
    }

    /// Updates every non-frozen parameter that has a gradient. `lr` overrides
    /// the configured rate (for schedules).
    pub fn step_with_lr(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        if self.state.len() < ids.len() {
            self.state.resize(ids.len(), None);
        }
        let c = self.config;
        for id in ids {
            let p = store.get_mut(id);
            if p.frozen {
                continue;
            }
            let Some(g) = p.grad.as_ref() else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGrad(p.name.clone()));
            }
            let st = self.state[id.index()].get_or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
                step: 0,
            });
            st.step += 1;
            let bc1 = 1.0 - c.beta1.powi(st.step as i32);
            let bc2 = 1.0 - c.beta2.powi(st.step as i32);
            for (((w, &gi), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(st.m.iter_mut())
                .zip(st.v.iter_mut())
            {
                *m = c.beta1 * *m + (1.0 - c.beta1) * gi;
                *v = c.beta2 * *v + (1.0 - c.beta2) * gi * gi;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *w);
            }
        }
        Ok(())
    }

    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        self.step_with_lr(store, self.config.lr)
    }
}

/// Learning-rate schedule over epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear warmup then cosine decay to zero at the final epoch.
    WarmupCosine { warmup_epochs: usize },
}

impl LrSchedule {
    pub fn lr_at(&self, base: f64, epoch: usize, total_epochs: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::WarmupCosine { warmup_epochs } => {
                if epoch < warmup_epochs {
                    base * (epoch + 1) as f64 / warmup_epochs as f64
                } else {
                    let span = total_epochs.saturating_sub(warmup_epochs).max(1) as f64;
                    let progress = (epoch - warmup_epochs) as f64 / span;
                    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(v: f64, frozen: bool, g: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.insert("p", Tensor::scalar(v), frozen).unwrap();
        s.accumulate_grad(id, &[g]);
        (s, id)
    }

    #[test]
    fn frozen_param_unchanged() {
        let (mut s, id) = scalar_store(1.5, true, 0.3);
        AdamW::new(AdamWConfig::default()).step(&mut s).unwrap();
        assert_eq!(s.value(id).data()[0], 1.5);
    }

    #[test]
    fn one_step_matches_hand_calculation() {
        let cfg = AdamWConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        };
        let (mut s, id) = scalar_store(2.0, false, 0.5);
        AdamW::new(cfg).step(&mut s).unwrap();
        // m = 0.05, v = 0.00025; m̂ = 0.5, v̂ = 0.25; step = 0.5/(0.5+1e-8)
        let expected = 2.0 - 0.1 * (0.5 / (0.5 + 1e-8) + 0.01 * 2.0);
        assert!((s.value(id).data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let (mut s, id) = scalar_store(-0.75, false, 0.0);
        AdamW::new(cfg).step(&mut s).unwrap();
        assert_eq!(s.value(id).data()[0], -0.75);
    }

    #[test]
    fn nan_gradient_aborts_with_name() {
        let (mut s, _) = scalar_store(1.0, false, f64::NAN);
        let err = AdamW::new(AdamWConfig::default()).step(&mut s).unwrap_err();
        assert!(err.to_string().contains("`p`"));
    }

    #[test]
    fn warmup_cosine_shape() {
        let s = LrSchedule::WarmupCosine { warmup_epochs: 10 };
        assert!((s.lr_at(1.0, 0, 100) - 0.1).abs() < 1e-15);
        assert!((s.lr_at(1.0, 10, 100) - 1.0).abs() < 1e-15);
        assert!(s.lr_at(1.0, 99, 100) < 0.01);
    }
}
