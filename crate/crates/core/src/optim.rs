//! Adam and the cosine learning-rate schedule.

use crate::checkpoint::EXTRA_PREFIX;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
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

/// Adam with bias correction. Moments are kept in parameter order.
#[derive(Clone, Debug)]
pub struct Adam<T: Real> {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let m: Vec<Tensor<T>> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Adam {
            config,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    /// One update; parameters whose gradient is `None` are left untouched.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::pre(
                "adam",
                format!("{} gradients for {} parameters", grads.len(), self.m.len()),
            ));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let (b1, b2) = (T::lit(beta1), T::lit(beta2));
        let (one, step_size, eps) = (T::one(), T::lit(lr / bc1), T::lit(eps));
        let root_bc2 = T::lit(bc2.sqrt());
        for ((p, g), (m, v)) in store
            .values_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let Some(g) = g else { continue };
            if g.shape() != p.shape() {
                return Err(Error::shape("adam", p.shape(), g.shape()));
            }
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                *pi -= step_size * *mi / (vi.sqrt() / root_bc2 + eps);
            }
        }
        Ok(())
    }

    /// Moments and step as checkpoint extras.
    pub fn to_extras(&self, store: &ParamStore<T>) -> Vec<(String, Tensor<f32>)> {
        let mut out = vec![(format!("{EXTRA_PREFIX}adam.step"), Tensor::scalar(self.step as f32))];
        for ((name, _), (m, v)) in store.iter().zip(self.m.iter().zip(&self.v)) {
            out.push((format!("{EXTRA_PREFIX}adam.m.{name}"), m.cast()));
            out.push((format!("{EXTRA_PREFIX}adam.v.{name}"), v.cast()));
        }
        out
    }

    pub fn from_extras(store: &ParamStore<T>, config: AdamConfig, extras: &[(String, Tensor<f32>)]) -> Result<Self> {
        let find = |key: String| {
            extras
                .iter()
                .find(|(n, _)| *n == key)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks optimizer state {key}")))
        };
        let step = find(format!("{EXTRA_PREFIX}adam.step"))?.data()[0] as u64;
        let mut adam = Adam::new(store, config);
        adam.step = step;
        for (k, (name, p)) in store.iter().enumerate() {
            let m = find(format!("{EXTRA_PREFIX}adam.m.{name}"))?;
            let v = find(format!("{EXTRA_PREFIX}adam.v.{name}"))?;
            if m.shape() != p.shape() || v.shape() != p.shape() {
                return Err(Error::shape("adam state", p.shape(), m.shape()));
            }
            adam.m[k] = m.cast();
            adam.v[k] = v.cast();
        }
        Ok(adam)
    }
}

/// `lr(t) = lr_final + ½(lr_init − lr_final)(1 + cos(πt/T))`, held at `lr_final` past `T`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub lr_init: f64,
    pub lr_final: f64,
    pub total: u64,
}

impl CosineSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        if self.total == 0 {
            return self.lr_final;
        }
        let frac = step.min(self.total) as f64 / self.total as f64;
        self.lr_final + 0.5 * (self.lr_init - self.lr_final) * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}
