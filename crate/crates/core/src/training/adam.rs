//! Bias-corrected Adam with L2 decay on a chosen subset of parameters.

use blinknet_tensor::Tensor;
use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    decay: bool,
}

/// Optimizer state: first and second moments per named parameter and the
/// step counter.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    moments: IndexMap<String, Moments>,
}

impl Adam {
    /// `decays(name)` selects the parameters that receive the L2 term.
    pub fn new(config: AdamConfig, params: &ParamStore<f32>, decays: impl Fn(&str) -> bool) -> Self {
        let moments = params
            .iter()
            .map(|(name, t)| {
                let n = t.len();
                (
                    name.to_string(),
                    Moments {
                        m: vec![0.0; n],
                        v: vec![0.0; n],
                        decay: decays(name),
                    },
                )
            })
            .collect();
        Adam {
            config,
            step: 0,
            moments,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr`. The L2 term `weight_decay * w` is
    /// added to the gradient of every decayed parameter before the moments.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &IndexMap<String, Tensor<f32>>, lr: f64) -> Result<()> {
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let correct1 = 1.0 - c.beta1.powi(t);
        let correct2 = 1.0 - c.beta2.powi(t);
        for (name, w) in params.iter_mut() {
            let state = self
                .moments
                .get_mut(name)
                .ok_or_else(|| Error::MissingParam(format!("optimizer state for {name}")))?;
            let g = grads.get(name).ok_or_else(|| Error::MissingParam(format!("gradient of {name}")))?;
            if g.len() != w.len() {
                return Err(Error::LengthMismatch(format!(
                    "gradient of {name} has {} values for {} weights",
                    g.len(),
                    w.len()
                )));
            }
            let decay = if state.decay { c.weight_decay } else { 0.0 };
            for (((wi, &gi), m), v) in w
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(&mut state.m)
                .zip(&mut state.v)
            {
                let gi = gi as f64 + decay * *wi as f64;
                *m = c.beta1 * *m + (1.0 - c.beta1) * gi;
                *v = c.beta2 * *v + (1.0 - c.beta2) * gi * gi;
                let m_hat = *m / correct1;
                let v_hat = *v / correct2;
                *wi = (*wi as f64 - lr * m_hat / (v_hat.sqrt() + c.epsilon)) as f32;
            }
        }
        Ok(())
    }
}
