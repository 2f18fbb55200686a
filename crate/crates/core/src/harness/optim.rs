//! Adam with bias correction.

use diffrep_tensor::{ParamStore, Tensor};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for every tensor of one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        Self::with_config(store, AdamConfig::default())
    }

    pub fn with_config(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn first_moment(&self, index: usize) -> &[f64] {
        &self.first[index]
    }

    pub fn second_moment(&self, index: usize) -> &[f64] {
        &self.second[index]
    }
}

/// One Adam step over every tensor that has a gradient. Gradients are
/// given in store order; `None` leaves a tensor (and its moments) untouched.
pub fn adam_update(
    store: &mut ParamStore,
    grads: &[Option<Tensor>],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if grads.len() != store.len() {
        return Err(Error::CountMismatch {
            what: "gradients vs parameters",
            left: grads.len(),
            right: store.len(),
        });
    }
    for (id, grad) in store.ids().zip(grads) {
        if let Some(grad) = grad {
            let spec = store.spec(id);
            if grad.shape() != spec.shape.as_slice() {
                return Err(Error::shape("gradient", &spec.shape, grad.shape()));
            }
            if !grad.is_finite() {
                return Err(Error::NonFinite {
                    what: "gradient",
                    name: spec.name.clone(),
                });
            }
        }
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let c1 = 1.0 - beta1.powi(state.step as i32);
    let c2 = 1.0 - beta2.powi(state.step as i32);
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let Some(grad) = &grads[i] else { continue };
        if !store.spec(id).trainable {
            continue;
        }
        let mut value = store.get(id).clone();
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        for (((p, g), m), v) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
        store.set(id, value);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use diffrep_tensor::{Init, ParamLayout};

    fn scalar_store(v: f64) -> ParamStore {
        let mut layout = ParamLayout::new();
        layout.add("w", [1], Init::Zeros);
        let mut store = layout.materialize(0);
        let id = store.find("w").unwrap();
        store.set(id, Tensor::new([1], vec![v]));
        store
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut store = scalar_store(1.5);
        let mut state = AdamState::new(&store);
        adam_update(&mut store, &[Some(Tensor::zeros([1]))], &mut state, 0.1).unwrap();
        assert_eq!(store.get(store.find("w").unwrap()).data(), &[1.5]);
    }

    #[test]
    fn first_step_by_hand() {
        let mut store = scalar_store(2.0);
        let mut state = AdamState::new(&store);
        adam_update(
            &mut store,
            &[Some(Tensor::new([1], vec![1.0]))],
            &mut state,
            0.1,
        )
        .unwrap();
        // m̂ = 1, v̂ = 1 after bias correction.
        let expected = 2.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((store.get(store.find("w").unwrap()).data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_finite_gradients_by_name() {
        let mut store = scalar_store(0.0);
        let mut state = AdamState::new(&store);
        let err = adam_update(
            &mut store,
            &[Some(Tensor::new([1], vec![f64::NAN]))],
            &mut state,
            0.1,
        )
        .unwrap_err();
        assert!(err.to_string().contains("`w`"));
        assert_eq!(state.step, 0);
    }
}
