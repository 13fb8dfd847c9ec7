use serde::{Deserialize, Serialize};

use super::param::ParamStore;
use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay coefficient, applied as `p -= lr * weight_decay * p`
    /// to parameters that opt in.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Bias-corrected Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>, config: AdamConfig) -> Result<Self> {
        if !(config.lr > 0.0)
            || !(0.0..1.0).contains(&config.beta1)
            || !(0.0..1.0).contains(&config.beta2)
            || !(config.eps > 0.0)
            || !(config.weight_decay >= 0.0)
        {
            return Err(Error::InvalidArgument(format!("invalid Adam settings {config:?}")));
        }
        let zeros = || params.iter().map(|p| Tensor::zeros(p.tensor.shape())).collect();
        Ok(AdamState {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        })
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        if let Some(bad) = params
            .iter()
            .zip(grads)
            .find(|(_, g)| !g.all_finite())
            .map(|(p, _)| p.name.clone())
        {
            return Err(Error::Numerical(format!("non-finite gradient for {bad}")));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let one = T::one();
        let corr1 = T::from_f64_lossy(1.0 - c.beta1.powi(t));
        let corr2 = T::from_f64_lossy(1.0 - c.beta2.powi(t));
        let lr = T::from_f64_lossy(c.lr);
        let eps = T::from_f64_lossy(c.eps);
        let decay = T::from_f64_lossy(c.lr * c.weight_decay);

        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let use_decay = p.weight_decay_enabled && c.weight_decay > 0.0;
            let pd = p.tensor.data_mut();
            for (((w, &gi), mi), vi) in pd
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let m_hat = *mi / corr1;
                let v_hat = *vi / corr2;
                if use_decay {
                    *w -= decay * *w;
                }
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64, decay: bool) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("p", Tensor::scalar(v), decay);
        s
    }

    #[test]
    fn hand_stepped_first_update() {
        let mut store = scalar_store(1.0, false);
        let cfg = AdamConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(&store, cfg).unwrap();
        st.step(&mut store, &[Tensor::scalar(1.0)]).unwrap();
        let want = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
        assert!((store.iter().next().unwrap().tensor.data()[0] - want).abs() < 1e-12);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut store = scalar_store(0.75, true);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(&store, cfg).unwrap();
        for _ in 0..5 {
            st.step(&mut store, &[Tensor::scalar(0.0)]).unwrap();
        }
        assert_eq!(store.iter().next().unwrap().tensor.data()[0], 0.75);
    }

    #[test]
    fn decay_only_touches_opted_in_parameters() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::scalar(1.0), true);
        store.add("b", Tensor::scalar(1.0), false);
        let cfg = AdamConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(&store, cfg).unwrap();
        st.step(&mut store, &[Tensor::scalar(0.0), Tensor::scalar(0.0)]).unwrap();
        let vals: Vec<f64> = store.iter().map(|p| p.tensor.data()[0]).collect();
        assert!((vals[0] - 0.95).abs() < 1e-12);
        assert_eq!(vals[1], 1.0);
    }

    #[test]
    fn non_finite_gradient_is_reported() {
        let mut store = scalar_store(1.0, false);
        let mut st = AdamState::new(&store, AdamConfig::default()).unwrap();
        let err = st.step(&mut store, &[Tensor::scalar(f64::NAN)]).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
        assert_eq!(st.step, 0);
    }

    #[test]
    fn identical_streams_stay_identical() {
        let mut a = scalar_store(0.3, true);
        let mut b = scalar_store(0.3, true);
        let mut sa = AdamState::new(&a, AdamConfig::default()).unwrap();
        let mut sb = AdamState::new(&b, AdamConfig::default()).unwrap();
        for i in 0..20 {
            let g = Tensor::scalar((i as f64 * 0.7).sin());
            sa.step(&mut a, std::slice::from_ref(&g)).unwrap();
            sb.step(&mut b, &[g]).unwrap();
        }
        assert_eq!(
            a.iter().next().unwrap().tensor.data(),
            b.iter().next().unwrap().tensor.data()
        );
    }
}
