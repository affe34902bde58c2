//! AdamW with decoupled weight decay, and the cosine learning-rate schedule.

use crate::error::{invalid, NnError, Result};
use crate::graph::ParamGrads;
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Moment accumulators, one pair per parameter, plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.tensor.shape()))
                .collect()
        };
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub state: OptimizerState<T>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, store: &ParamStore<T>) -> Self {
        Self {
            config,
            state: OptimizerState::new(store),
        }
    }

    /// One update at learning rate `lr`. Weight decay is applied to
    /// parameters of rank two or more (weight matrices), not to biases,
    /// norm scales or embeddings of rank one.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &ParamGrads<T>,
        lr: f64,
    ) -> Result<()> {
        if self.state.m.len() != store.len() {
            return Err(invalid(
                "optimizer state does not match the parameter store",
            ));
        }
        let c = self.config;
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        for id in store.ids().collect::<Vec<_>>() {
            let g = grads.get(id).ok_or_else(|| {
                NnError::ContractViolation(format!(
                    "no gradient for parameter `{}`",
                    store.name(id)
                ))
            })?;
            let p = store.get_mut(id);
            if g.shape() != p.shape() {
                return Err(invalid(format!(
                    "gradient shape {:?} vs parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let decay = if p.rank() >= 2 {
                T::of(lr * c.weight_decay)
            } else {
                T::zero()
            };
            let m = self.state.m[id.index()].data_mut();
            let v = self.state.v[id.index()].data_mut();
            for (((w, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + one_b1 * *gi;
                *vi = b2 * *vi + one_b2 * *gi * *gi;
                let m_hat = *mi / T::of(bc1);
                let v_hat = *vi / T::of(bc2);
                *w = *w - decay * *w;
                *w = *w - T::of(lr) * m_hat / (v_hat.sqrt() + T::of(c.eps));
            }
            if !p.is_finite() {
                return Err(NnError::NumericFailure { op: "adamw_step" });
            }
        }
        Ok(())
    }
}

/// Half-cosine decay from `base_lr` at step 0 to `min_lr` at `total_steps`;
/// steps past the end stay at `min_lr`.
pub fn cosine_schedule(step: u64, total_steps: u64, base_lr: f64, min_lr: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return min_lr;
    }
    let progress = step as f64 / total_steps as f64;
    min_lr + 0.5 * (base_lr - min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}
