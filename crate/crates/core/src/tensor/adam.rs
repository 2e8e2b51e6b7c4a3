use super::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates, one buffer per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// Apply one bias-corrected Adam update at learning rate `lr`.
    ///
    /// `grads[i]` is the gradient of parameter `i`. Any non-finite entry
    /// rejects the whole step before parameters or moments are touched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], cfg: &AdamConfig, lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::InvalidInput(format!(
                "adam: {} params, {} gradients, {} moment buffers",
                store.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (id, g) in store.ids().zip(grads) {
            if g.len() != store.get(id).len() {
                return Err(Error::InvalidInput(format!(
                    "adam: gradient for `{}` has {} entries, parameter has {}",
                    store.name(id),
                    g.len(),
                    store.get(id).len()
                )));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(store.name(id).to_string()));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id).data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let g = grads[i][j];
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one_param(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", Tensor::scalar(x));
        s
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut store = one_param(1.0);
        let mut st = AdamState::new(&store);
        let cfg = AdamConfig::default();
        st.step(&mut store, &[vec![2.0]], &cfg, cfg.lr).unwrap();
        let after_first = store.get(store.find("x").unwrap()).data()[0];
        let (m1, v1) = (st.m[0][0], st.v[0][0]);
        st.step(&mut store, &[vec![0.0]], &cfg, cfg.lr).unwrap();
        assert!((st.m[0][0] - cfg.beta1 * m1).abs() < 1e-15);
        assert!((st.v[0][0] - cfg.beta2 * v1).abs() < 1e-15);
        // Fresh state with zero gradient: no movement at all.
        let mut store = one_param(after_first);
        let mut st = AdamState::new(&store);
        st.step(&mut store, &[vec![0.0]], &cfg, cfg.lr).unwrap();
        assert_eq!(store.get(store.find("x").unwrap()).data()[0], after_first);
    }

    #[test]
    fn constant_gradient_moves_against_its_sign() {
        let mut store = one_param(0.0);
        let mut st = AdamState::new(&store);
        let cfg = AdamConfig::default();
        let mut prev = 0.0;
        for _ in 0..200 {
            st.step(&mut store, &[vec![-0.7]], &cfg, cfg.lr).unwrap();
            let x = store.get(store.find("x").unwrap()).data()[0];
            assert!(x > prev);
            // Step magnitude approaches lr.
            assert!(x - prev <= cfg.lr * (1.0 + 1e-6));
            prev = x;
        }
    }

    #[test]
    fn one_step_on_square_reduces_loss() {
        let mut store = one_param(1.0);
        let mut st = AdamState::new(&store);
        let cfg = AdamConfig::default();
        let x = store.get(store.find("x").unwrap()).data()[0];
        st.step(&mut store, &[vec![2.0 * x]], &cfg, cfg.lr).unwrap();
        let x1 = store.get(store.find("x").unwrap()).data()[0];
        assert!(x1 * x1 < x * x);
        assert!((x1 - (1.0 - cfg.lr)).abs() < 1e-9);
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_side_effects() {
        let mut store = one_param(1.0);
        let mut st = AdamState::new(&store);
        let cfg = AdamConfig::default();
        let err = st.step(&mut store, &[vec![f64::NAN]], &cfg, cfg.lr).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "x"));
        assert_eq!(st.step, 0);
        assert_eq!(store.get(store.find("x").unwrap()).data()[0], 1.0);
    }
}
