use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Weights;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for a fixed list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, shapes: &[(usize, usize)]) -> Self {
        let zeros = || shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn for_weights(config: AdamConfig, w: &Weights) -> Self {
        let shapes: Vec<_> = w.named_params().iter().map(|(_, m)| m.shape()).collect();
        Self::new(config, &shapes)
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: Vec<&mut Matrix>, grads: &[&Matrix]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} params, {} grads, {} moments", params.len(), grads.len(), self.m.len()),
            ));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::shape("adam_step", format!("{:?} vs {:?}", p.shape(), g.shape())));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let (pd, gd) = (p.data_mut(), g.data());
            for (((pi, &gi), mi), vi) in pd.iter_mut().zip(gd).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *pi -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Applies one Adam step to every parameter of `w`.
pub fn adam_step(w: &mut Weights, grads: &Weights, state: &mut OptimizerState) -> Result<()> {
    let g: Vec<&Matrix> = grads.named_params().into_iter().map(|(_, m)| m).collect();
    state.step(w.tensors_mut(), &g)
}
