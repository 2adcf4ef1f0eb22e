//! Adam with a separate step size for the entropy-model parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub entropy_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, entropy_lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.entropy_lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Optimizer state. Moments are kept in f64 whatever the model scalar is.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub steps: u64,
    /// Learning-rate multiplier; halved by [`Adam::halve_lr`].
    pub lr_scale: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<S: Scalar>(store: &ParamStore<S>, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Adam { config, steps: 0, lr_scale: 1.0, m: zeros.clone(), v: zeros }
    }

    pub fn halve_lr(&mut self) {
        self.lr_scale *= 0.5;
    }

    /// One update from the gradients currently held by `store`. Refuses to
    /// touch the parameters if any gradient is non-finite.
    pub fn step<S: Scalar>(&mut self, store: &mut ParamStore<S>) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::internal("optimizer state does not match the parameter store"));
        }
        for (_, p) in store.iter() {
            if p.grad.data().iter().any(|g| !g.as_f64().is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient in {}", p.name)));
            }
        }
        self.steps += 1;
        let c = self.config;
        let t = self.steps as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, p) in store.iter_mut().enumerate() {
            let lr = self.lr_scale * if p.name.starts_with("entropy.") { c.entropy_lr } else { c.lr };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let grads = p.grad.data().to_vec();
            for (j, (w, g)) in p.value.data_mut().iter_mut().zip(grads).enumerate() {
                let g = g.as_f64();
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let update = lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                *w = S::of(w.as_f64() - update);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor4;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut store = ParamStore::<f64>::new();
        let a = store.insert("w", Tensor4::from_vec([1, 1, 1, 2], vec![1.0, 1.0]).unwrap()).unwrap();
        let b = store.insert("entropy.k1.logits", Tensor4::scalar(0.0)).unwrap();
        store.accumulate_grad(a, &Tensor4::from_vec([1, 1, 1, 2], vec![3.0, -0.5]).unwrap()).unwrap();
        store.accumulate_grad(b, &Tensor4::scalar(2.0)).unwrap();
        let mut opt = Adam::new(&store, AdamConfig { lr: 0.1, entropy_lr: 0.01, ..Default::default() });
        opt.step(&mut store).unwrap();
        let w = store.value(a).data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] - 1.1).abs() < 1e-6);
        assert!((store.value(b).item().unwrap() + 0.01).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradients_leave_parameters_untouched() {
        let mut store = ParamStore::<f64>::new();
        let a = store.insert("w", Tensor4::scalar(1.0)).unwrap();
        store.accumulate_grad(a, &Tensor4::scalar(f64::NAN)).unwrap();
        let mut opt = Adam::new(&store, AdamConfig::default());
        assert!(matches!(opt.step(&mut store), Err(Error::Numeric(_))));
        assert_eq!(store.value(a).item().unwrap(), 1.0);
        assert_eq!(opt.steps, 0);
    }
}
