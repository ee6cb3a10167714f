//! AdamW over any [`ParamSet`].

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::params::ParamSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: Some(1.0),
        }
    }
}

pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl AdamW {
    pub fn new<P: ParamSet>(params: &P, config: AdamWConfig) -> Self {
        let zeros: Vec<ArrayD<f64>> = params
            .tensors()
            .iter()
            .map(|(_, t)| ArrayD::zeros(t.raw_dim()))
            .collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Returns the pre-clip global gradient norm.
    pub fn step<P: ParamSet>(&mut self, params: &mut P, grads: &P) -> f64 {
        let c = &self.config;
        let grads = grads.tensors();
        let norm = grads
            .iter()
            .map(|(_, g)| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let clip = match c.clip_norm {
            Some(max) if norm > max && norm > 0.0 => max / norm,
            _ => 1.0,
        };
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, ((_, mut p), (_, g))) in params.tensors_mut().into_iter().zip(grads).enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut p)
                .and(&g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    let g = g * clip;
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *p);
                });
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};

    #[test]
    fn minimises_a_quadratic() {
        let mut x: Array1<f64> = array![3.0, -2.0];
        let mut opt = AdamW::new(
            &x,
            AdamWConfig {
                lr: 0.1,
                clip_norm: None,
                ..Default::default()
            },
        );
        for _ in 0..500 {
            let g = x.mapv(|v| 2.0 * v);
            opt.step(&mut x, &g);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-2), "{x:?}");
    }

    #[test]
    fn zero_gradient_leaves_params_without_decay() {
        let mut x: Array1<f64> = array![1.0, 2.0];
        let mut opt = AdamW::new(&x, AdamWConfig::default());
        let g = Array1::zeros(2);
        opt.step(&mut x, &g);
        assert_eq!(x, array![1.0, 2.0]);
    }
}
