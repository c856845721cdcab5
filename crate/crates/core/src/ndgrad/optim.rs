use serde::{Deserialize, Serialize};

use super::{NdError, ParamSet, Real, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam moment estimates for one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<R: Real> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: ParamSet<R>,
    pub v: ParamSet<R>,
}

impl<R: Real> Adam<R> {
    pub fn new(params: &ParamSet<R>, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// One bias-corrected update of `params` against `grads` (descent).
    pub fn step(&mut self, params: &mut ParamSet<R>, grads: &ParamSet<R>, lr: f64) -> Result<()> {
        params.check_compatible(grads)?;
        params.check_compatible(&self.m)?;
        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let (b1, b2) = (R::of(beta1), R::of(beta2));
        let (ob1, ob2) = (R::of(1.0 - beta1), R::of(1.0 - beta2));
        let step_size = R::of(lr / bc1);
        let bc2_sqrt = R::of(bc2.sqrt());
        let eps = R::of(eps);
        let decay = R::of(1.0 - lr * weight_decay);

        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads.tensors())
            .zip(ms.iter_mut())
            .zip(vs.iter_mut())
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mv = b1 * *mv + ob1 * gv;
                *vv = b2 * *vv + ob2 * gv * gv;
                let denom = vv.sqrt() / bc2_sqrt + eps;
                *pv = *pv * decay - step_size * *mv / denom;
            }
        }
        if params.tensors().iter().any(|t| !t.is_finite()) {
            return Err(NdError::NonFinite("adam"));
        }
        Ok(())
    }
}

/// `shadow <- decay * shadow + (1 - decay) * params`, elementwise.
pub fn ema_update<R: Real>(shadow: &mut ParamSet<R>, params: &ParamSet<R>, decay: f64) -> Result<()> {
    shadow.check_compatible(params)?;
    let d = R::of(decay);
    let od = R::of(1.0 - decay);
    for (s, p) in shadow.tensors_mut().iter_mut().zip(params.tensors()) {
        for (sv, &pv) in s.data_mut().iter_mut().zip(p.data()) {
            *sv = d * *sv + od * pv;
        }
    }
    Ok(())
}
