//! Adam with bias correction.

use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state for one [`ParamStore`]. Moments are kept in store order.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f32>> = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// Rebuild from serialized moments. Returns `None` if the moment shapes do
    /// not line up with `params`.
    pub fn from_state(
        config: AdamConfig,
        params: &ParamStore,
        step: u64,
        first: Vec<Vec<f32>>,
        second: Vec<Vec<f32>>,
    ) -> Option<Self> {
        let lens: Vec<usize> = params.iter().map(|p| p.value.len()).collect();
        let ok = |m: &[Vec<f32>]| {
            m.len() == lens.len() && m.iter().zip(&lens).all(|(v, &l)| v.len() == l)
        };
        (ok(&first) && ok(&second)).then_some(Self {
            config,
            step,
            first,
            second,
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<f32>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<f32>] {
        &self.second
    }

    /// Apply one update. `grads` is aligned with the store; `None` entries
    /// are treated as zero gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<&Tensor>]) {
        assert_eq!(grads.len(), params.len(), "one gradient slot per parameter");
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - (beta1 as f64).powi(t);
        let bc2 = 1.0 - (beta2 as f64).powi(t);
        let step_size = (lr as f64 / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        for (k, param) in params.iter_mut().enumerate() {
            let m = &mut self.first[k];
            let v = &mut self.second[k];
            let values = param.value.data_mut();
            match grads[k] {
                Some(g) => {
                    for i in 0..values.len() {
                        let gi = g.data()[i];
                        m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                        values[i] -= step_size * m[i] / (v[i].sqrt() / bc2_sqrt + eps);
                    }
                }
                None => {
                    for i in 0..values.len() {
                        m[i] *= beta1;
                        v[i] *= beta2;
                        values[i] -= step_size * m[i] / (v[i].sqrt() / bc2_sqrt + eps);
                    }
                }
            }
        }
    }
}
