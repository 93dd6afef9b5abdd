//! AdamW and the parameter EMA.

use crate::error::{Error, Result};
use crate::nets::ParamSet;
use crate::tensor::Tensor;

use super::config::OptimConfig;

/// Bias-corrected Adam with decoupled, multiplicative weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: OptimConfig,
    pub m: ParamSet<f32>,
    pub v: ParamSet<f32>,
    pub step: u64,
}

impl AdamW {
    pub fn new(config: OptimConfig, params: &ParamSet<f32>) -> AdamW {
        AdamW {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    /// One update. `grads` must follow the parameter order. Nothing is
    /// modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamSet<f32>, grads: &[Tensor<f32>]) -> Result<()> {
        if grads.len() != params.len() || !params.same_layout(&self.m) {
            return Err(Error::InvalidArgument(format!(
                "optimizer holds {} moments, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            p.expect_same_shape(g, "adamw_step")?;
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter '{name}'")));
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (c.beta1, c.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let decay = (1.0 - c.learning_rate * c.weight_decay) as f32;
        let (b1f, b2f) = (b1 as f32, b2 as f32);
        let (k1, k2) = ((1.0 - b1) as f32, (1.0 - b2) as f32);
        for (((p, m), v), g) in params
            .tensors_mut()
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
            .zip(grads)
        {
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = b1f * md[i] + k1 * gi;
                vd[i] = b2f * vd[i] + k2 * gi * gi;
                let m_hat = md[i] as f64 / bc1;
                let v_hat = vd[i] as f64 / bc2;
                if c.weight_decay != 0.0 {
                    pd[i] *= decay;
                }
                pd[i] -= (c.learning_rate * m_hat / (v_hat.sqrt() + c.eps)) as f32;
            }
        }
        Ok(())
    }
}

/// Shadow copy of parameters updated as `decay·shadow + (1 − decay)·params`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    pub decay: f64,
    pub shadow: ParamSet<f32>,
}

impl EmaState {
    pub fn new(decay: f64, params: &ParamSet<f32>) -> EmaState {
        EmaState {
            decay,
            shadow: params.clone(),
        }
    }

    pub fn update(&mut self, params: &ParamSet<f32>) -> Result<()> {
        self.update_with_decay(params, self.decay)
    }

    pub fn update_with_decay(&mut self, params: &ParamSet<f32>, decay: f64) -> Result<()> {
        if !params.same_layout(&self.shadow) {
            return Err(Error::InvalidArgument("EMA shadow layout differs from parameters".into()));
        }
        let (d, k) = (decay as f32, (1.0 - decay) as f32);
        for (s, (_, p)) in self.shadow.tensors_mut().zip(params.iter()) {
            for (a, &b) in s.data_mut().iter_mut().zip(p.data()) {
                *a = d * *a + k * b;
            }
        }
        Ok(())
    }
}

/// Decay used after `step` completed updates when warmup is enabled.
pub fn warmup_decay(decay: f64, step: u64) -> f64 {
    decay.min((1.0 + step as f64) / (10.0 + step as f64))
}
