use serde::{Deserialize, Serialize};

use super::{NumericsError, ParamId, ParamStore, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates for every parameter of one store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect::<Vec<_>>();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }

    fn check_matches(&self, store: &ParamStore<T>) -> Result<(), NumericsError> {
        if self.m.len() != store.len() {
            return Err(NumericsError::Mismatch(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        for (id, m) in store.ids().zip(&self.m) {
            if m.shape() != store.value(id).shape() {
                return Err(NumericsError::Mismatch(format!("moment shape for {}", store.name(id))));
            }
        }
        Ok(())
    }
}

/// One Adam update over every parameter touched by the last backward pass.
pub fn adam_step<T: Real>(store: &mut ParamStore<T>, state: &mut AdamState<T>) -> Result<(), NumericsError> {
    adam_step_filtered(store, state, |_| true)
}

/// Like [`adam_step`] but only parameters accepted by `update` move.
///
/// Untouched parameters keep both their values and their moments, so a
/// parameter that did not take part in a loss is not dragged along by stale
/// momentum.
pub fn adam_step_filtered<T: Real>(
    store: &mut ParamStore<T>,
    state: &mut AdamState<T>,
    update: impl Fn(ParamId) -> bool,
) -> Result<(), NumericsError> {
    state.check_matches(store)?;
    for id in store.ids() {
        if store.grad(id).data().iter().any(|g| g.is_nan()) {
            return Err(NumericsError::NonFiniteGradient(store.name(id).to_string()));
        }
    }
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let bc1 = T::of(1.0 - beta1.powi(t));
    let bc2 = T::of(1.0 - beta2.powi(t));
    let (b1, b2) = (T::of(beta1), T::of(beta2));
    let (lr, eps) = (T::of(lr), T::of(eps));
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        if !store.param(id).touched || !update(id) {
            continue;
        }
        let i = id.index();
        let p = store.param_mut(id);
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, &g), mi), vi) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m).zip(v) {
            *mi = b1 * *mi + (T::one() - b1) * g;
            *vi = b2 * *vi + (T::one() - b2) * g * g;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f64, g: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.insert("x", Tensor::scalar(x)).unwrap();
        s.accumulate_grad(id, &Tensor::scalar(g));
        (s, id)
    }

    /// Straight transcription of the Adam recurrence for one scalar.
    fn reference(steps: usize, x0: f64, g: f64, c: AdamConfig) -> Vec<f64> {
        let (mut m, mut v, mut x) = (0.0, 0.0, x0);
        let mut out = Vec::new();
        for t in 1..=steps {
            m = c.beta1 * m + (1.0 - c.beta1) * g;
            v = c.beta2 * v + (1.0 - c.beta2) * g * g;
            let mh = m / (1.0 - c.beta1.powi(t as i32));
            let vh = v / (1.0 - c.beta2.powi(t as i32));
            x -= c.lr * mh / (vh.sqrt() + c.eps);
            out.push(x);
        }
        out
    }

    #[test]
    fn zero_gradient_leaves_values_unchanged() {
        let (mut s, id) = scalar_store(1.25, 0.0);
        let mut st = AdamState::new(&s, AdamConfig::default());
        adam_step(&mut s, &mut st).unwrap();
        assert_eq!(s.value(id).item(), 1.25);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut s, id) = scalar_store(0.0, 1.0);
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let mut st = AdamState::new(&s, cfg);
        adam_step(&mut s, &mut st).unwrap();
        // -lr * 1 / (1 + eps)
        assert!((s.value(id).item() - (-0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((s.value(id).item() + 0.1).abs() < 1e-8);
    }

    #[test]
    fn two_steps_follow_reference_trajectory() {
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let (mut s, id) = scalar_store(0.3, 1.0);
        let mut st = AdamState::new(&s, cfg);
        let want = reference(2, 0.3, 1.0, cfg);
        for w in want {
            adam_step(&mut s, &mut st).unwrap();
            assert!((s.value(id).item() - w).abs() < 1e-12);
        }
        assert_eq!(st.step, 2);
    }

    #[test]
    fn nan_gradient_aborts_with_parameter_name() {
        let (mut s, id) = scalar_store(0.0, f64::NAN);
        let mut st = AdamState::new(&s, AdamConfig::default());
        let err = adam_step(&mut s, &mut st).unwrap_err();
        assert_eq!(err, NumericsError::NonFiniteGradient("x".into()));
        assert_eq!(s.value(id).item(), 0.0);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn untouched_parameters_are_skipped() {
        let mut s = ParamStore::<f64>::new();
        let a = s.insert("a", Tensor::scalar(1.0)).unwrap();
        let b = s.insert("b", Tensor::scalar(1.0)).unwrap();
        s.accumulate_grad(a, &Tensor::scalar(1.0));
        let mut st = AdamState::new(&s, AdamConfig::default());
        adam_step(&mut s, &mut st).unwrap();
        assert!(s.value(a).item() < 1.0);
        assert_eq!(s.value(b).item(), 1.0);
    }
}
