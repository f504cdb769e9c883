use serde::{Deserialize, Serialize};

use super::{ParamGroup, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Polynomial decay: `base · (1 − t/T)^power`, clamped at zero past `T`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolySchedule {
    pub total_steps: u64,
    pub power: f64,
}

impl PolySchedule {
    pub fn factor(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return 1.0;
        }
        let frac = (step.min(self.total_steps) as f64) / self.total_steps as f64;
        (1.0 - frac).max(0.0).powf(self.power)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    /// Base rate for parameters in [`ParamGroup::VoxelHead`].
    pub head_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub schedule: PolySchedule,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            head_lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            schedule: PolySchedule {
                total_steps: 1,
                power: 0.9,
            },
        }
    }
}

/// AdamW moments and step counter, one buffer pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    pub fn lr(&self, group: ParamGroup) -> f64 {
        let base = match group {
            ParamGroup::Base => self.config.lr,
            ParamGroup::VoxelHead => self.config.head_lr,
        };
        base * self.config.schedule.factor(self.step)
    }
}

/// One decoupled-weight-decay Adam update at the scheduled learning rate.
///
/// Parameters whose gradient is `None` did not take part in the forward pass
/// and are left untouched, moments included.
pub fn adamw_step(
    store: &mut ParamStore,
    state: &mut OptimizerState,
    grads: &[Option<Tensor>],
) -> Result<()> {
    if grads.len() != store.len() || grads.iter().all(Option::is_none) {
        return Err(Error::MissingGradients);
    }
    let cfg = state.config;
    let t = (state.step + 1) as i32;
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let Some(g) = &grads[id.index()] else { continue };
        let lr = state.lr(store.group(id));
        let p = store.get_mut(id);
        if p.shape() != g.shape() {
            return Err(Error::shape("adamw_step", p.shape(), g.shape()));
        }
        let m = state.first[id.index()].data_mut();
        let v = state.second[id.index()].data_mut();
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *p *= 1.0 - lr * cfg.weight_decay;
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let mhat = *m / bias1;
            let vhat = *v / bias2;
            *p -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    state.step += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> (ParamStore, crate::tensor::ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("p", ParamGroup::Base, Tensor::scalar(value)).unwrap();
        (store, id)
    }

    fn config(lr: f64, wd: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            head_lr: lr,
            weight_decay: wd,
            schedule: PolySchedule {
                total_steps: 100,
                power: 0.9,
            },
            ..Default::default()
        }
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let (mut store, id) = single(1.25);
        let mut state = OptimizerState::new(&store, config(0.1, 0.0));
        adamw_step(&mut store, &mut state, &[Some(Tensor::scalar(0.0))]).unwrap();
        assert_eq!(store.get(id).item(), 1.25);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn single_scalar_matches_hand_update() {
        // t=1: m = 0.1 g, v = 0.001 g², mhat = g, vhat = g², step = lr · g/(|g| + eps).
        let (mut store, id) = single(2.0);
        let mut state = OptimizerState::new(&store, config(0.01, 0.0));
        adamw_step(&mut store, &mut state, &[Some(Tensor::scalar(0.5))]).unwrap();
        let expected = 2.0 - 0.01 * 0.5 / (0.5 + 1e-8);
        assert!((store.get(id).item() - expected).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_only_shrinks() {
        let (mut store, id) = single(3.0);
        let mut state = OptimizerState::new(&store, config(0.01, 0.05));
        adamw_step(&mut store, &mut state, &[Some(Tensor::scalar(0.0))]).unwrap();
        assert!((store.get(id).item() - 3.0 * (1.0 - 0.01 * 0.05)).abs() < 1e-15);
    }

    #[test]
    fn missing_gradients_rejected() {
        let (mut store, _) = single(1.0);
        let mut state = OptimizerState::new(&store, config(0.01, 0.0));
        assert!(matches!(
            adamw_step(&mut store, &mut state, &[None]),
            Err(Error::MissingGradients)
        ));
    }

    #[test]
    fn schedule_is_monotone_and_ends_at_zero() {
        let s = PolySchedule {
            total_steps: 50,
            power: 0.9,
        };
        let mut prev = f64::INFINITY;
        for t in 0..=60 {
            let f = s.factor(t);
            assert!(f >= 0.0 && f <= prev);
            prev = f;
        }
        assert_eq!(s.factor(0), 1.0);
        assert_eq!(s.factor(50), 0.0);
        assert!((s.factor(25) - 0.5f64.powf(0.9)).abs() < 1e-15);
    }
}
