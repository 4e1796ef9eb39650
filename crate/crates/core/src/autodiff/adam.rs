//! Adam with bias correction and per-group learning rates.

use std::collections::HashMap;

use super::params::{GradBuffer, ParamGroup, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<Real>,
    pub v: Vec<Real>,
    pub step: u64,
}

impl Moments {
    pub fn new(len: usize) -> Self {
        Moments {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One in-place Adam update of `param`.
pub fn adam_step(param: &mut [Real], grad: &[Real], state: &mut Moments, lr: Real, cfg: AdamConfig) -> Result<()> {
    if param.len() != grad.len() || state.m.len() != param.len() {
        return Err(Error::shape("adam_step", &[param.len()], &[grad.len()]));
    }
    if lr <= 0.0 {
        return Err(Error::invalid(
            "adam_step",
            format!("learning rate {lr} must be positive"),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Adam over a [`ParamStore`]. Moments are kept per parameter and shared by
/// every task that updates it.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    pub config: AdamConfig,
    state: HashMap<ParamId, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            state: HashMap::new(),
        }
    }

    /// Applies `grads` to every parameter whose group has a learning rate
    /// under `lr_for`; others are skipped. Nothing is updated if any selected
    /// gradient is non-finite. Returns the number of parameters updated.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &GradBuffer,
        lr_for: impl Fn(ParamGroup) -> Option<Real>,
    ) -> Result<usize> {
        let selected: Vec<(ParamId, &[Real], Real)> = grads
            .iter()
            .filter_map(|(id, g)| lr_for(store.group(id)).map(|lr| (id, g, lr)))
            .collect();
        for (id, g, _) in &selected {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(store.name(*id).to_string()));
            }
        }
        for (id, g, lr) in &selected {
            let state = self.state.entry(*id).or_insert_with(|| Moments::new(g.len()));
            adam_step(store.value_mut(*id).data_mut(), g, state, *lr, self.config)?;
        }
        Ok(selected.len())
    }

    pub fn moments(&self, id: ParamId) -> Option<&Moments> {
        self.state.get(&id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut p = vec![1.5, -2.0];
        let mut st = Moments::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut st, 0.1, AdamConfig::default()).unwrap();
        assert_eq!(p, vec![1.5, -2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = g, v_hat = g^2 after correction, so the step is lr * g/(|g| + eps).
        let mut p = vec![0.0];
        let mut st = Moments::new(1);
        adam_step(&mut p, &[1.0], &mut st, 0.1, AdamConfig::default()).unwrap();
        let expected = -0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15, "{}", p[0]);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut x = vec![3.0];
        let mut st = Moments::new(1);
        for _ in 0..1000 {
            let g = [2.0 * x[0]];
            adam_step(&mut x, &g, &mut st, 0.05, AdamConfig::default()).unwrap();
        }
        assert!(x[0].abs() < 1e-3, "x = {}", x[0]);
    }

    #[test]
    fn rejects_nan_with_parameter_name() {
        let mut store = ParamStore::new();
        let id = store.add("lstm.w", ParamGroup::Tagger, Tensor::vector(vec![1.0, 2.0]));
        let mut grads = GradBuffer::new();
        grads.insert(id, vec![Real::NAN, 0.0]);
        let mut adam = Adam::default();
        let err = adam.step(&mut store, &grads, |_| Some(0.1)).unwrap_err();
        assert!(err.to_string().contains("lstm.w"));
        assert_eq!(store.value(id).data(), &[1.0, 2.0]);
    }

    #[test]
    fn groups_without_rate_are_skipped() {
        let mut store = ParamStore::new();
        let a = store.add("a", ParamGroup::Tagger, Tensor::scalar(1.0));
        let b = store.add("b", ParamGroup::RelationHead, Tensor::scalar(1.0));
        let mut grads = GradBuffer::new();
        grads.insert(a, vec![1.0]);
        grads.insert(b, vec![1.0]);
        let mut adam = Adam::default();
        let n = adam
            .step(&mut store, &grads, |g| (g == ParamGroup::Tagger).then_some(0.1))
            .unwrap();
        assert_eq!(n, 1);
        assert!(store.value(a).item() < 1.0);
        assert_eq!(store.value(b).item(), 1.0);
        assert!(adam.moments(b).is_none());
    }
}
