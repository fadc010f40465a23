//! Learning-rate schedule, AdamW, and the EMA shadow of the weights.
//!
//! Optimizer and EMA state are indexed by unique parameter storage, so a
//! shared MLP tensor has one moment buffer and one shadow and receives
//! exactly one update per step regardless of how many blocks read it.

use crate::error::{Error, Result};
use crate::model::params::ParamSet;
use crate::tensor::Elem;

/// Linear warmup from zero to `base_lr` over `warmup_steps`, then cosine
/// decay to `min_lr` at `total_steps`. Endpoints are exact: `warmup_steps`
/// maps to `base_lr` and `total_steps` to `min_lr`.
pub fn cosine_lr(
    step: usize,
    total_steps: usize,
    warmup_steps: usize,
    base_lr: f64,
    min_lr: f64,
) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("schedule needs total_steps >= 1".into()));
    }
    if warmup_steps >= total_steps {
        return Err(Error::Config(format!(
            "warmup ({warmup_steps} steps) must end before total_steps ({total_steps})"
        )));
    }
    if step > total_steps {
        return Err(Error::Config(format!(
            "step {step} is past the end of the schedule ({total_steps})"
        )));
    }
    if step < warmup_steps {
        return Ok(base_lr * step as f64 / warmup_steps as f64);
    }
    if step == warmup_steps {
        return Ok(base_lr);
    }
    if step == total_steps {
        return Ok(min_lr);
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(min_lr + 0.5 * (base_lr - min_lr) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// First/second-moment buffers, one pair per unique storage.
#[derive(Clone, Debug)]
pub struct AdamWState<T: Elem> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Elem> AdamWState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros: Vec<Vec<T>> =
            params.storages().iter().map(|s| vec![T::zero(); s.numel()]).collect();
        AdamWState { m: zeros.clone(), v: zeros, step: 0 }
    }
}

/// One bias-corrected AdamW step with decoupled weight decay
/// (θ ← θ − lr·m̂/(√v̂+eps) − lr·wd·θ), applied to every unique storage.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step<T: Elem>(
    params: &mut ParamSet<T>,
    grads: &[Vec<T>],
    state: &mut AdamWState<T>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
) -> Result<()> {
    let n = params.num_storages();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::Dim(format!(
            "optimizer saw {} gradient and {} moment buffers for {n} storages",
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f64(beta1);
    let b2 = T::from_f64(beta2);
    let one = T::one();
    let bc1 = T::from_f64(1.0 - beta1.powi(t));
    let bc2 = T::from_f64(1.0 - beta2.powi(t));
    let lr_t = T::from_f64(lr);
    let eps_t = T::from_f64(eps);
    let decay = T::from_f64(lr * weight_decay);

    for (i, storage) in params.storages_mut().iter_mut().enumerate() {
        if grads[i].len() != storage.numel() {
            return Err(Error::Dim(format!(
                "gradient for {} has {} values, storage has {}",
                storage.path,
                grads[i].len(),
                storage.numel()
            )));
        }
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for (j, theta) in storage.data.iter_mut().enumerate() {
            let g = grads[i][j];
            m[j] = b1 * m[j] + (one - b1) * g;
            v[j] = b2 * v[j] + (one - b2) * g * g;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *theta = *theta - lr_t * (mhat / (vhat.sqrt() + eps_t)) - decay * *theta;
        }
    }
    Ok(())
}

/// Exponential moving average of the weights, one shadow per unique
/// storage.
#[derive(Clone, Debug)]
pub struct EMAState<T: Elem> {
    pub shadow: Vec<Vec<T>>,
    pub decay: f64,
}

impl<T: Elem> EMAState<T> {
    pub fn from_params(params: &ParamSet<T>, decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::Config(format!("ema decay must be in [0, 1), got {decay}")));
        }
        Ok(EMAState {
            shadow: params.storages().iter().map(|s| s.data.clone()).collect(),
            decay,
        })
    }

    /// shadow ← decay·shadow + (1−decay)·param.
    pub fn update(&mut self, params: &ParamSet<T>) -> Result<()> {
        if self.shadow.len() != params.num_storages() {
            return Err(Error::Dim(format!(
                "EMA holds {} shadows for {} storages",
                self.shadow.len(),
                params.num_storages()
            )));
        }
        let d = T::from_f64(self.decay);
        let one_minus = T::from_f64(1.0 - self.decay);
        for (shadow, storage) in self.shadow.iter_mut().zip(params.storages()) {
            if shadow.len() != storage.numel() {
                return Err(Error::Dim(format!(
                    "EMA shadow for {} has {} values, storage has {}",
                    storage.path,
                    shadow.len(),
                    storage.numel()
                )));
            }
            for (s, &p) in shadow.iter_mut().zip(&storage.data) {
                *s = d * *s + one_minus * p;
            }
        }
        Ok(())
    }

    /// Swaps shadow and live weights in place; call twice to restore.
    pub fn swap(&mut self, params: &mut ParamSet<T>) -> Result<()> {
        if self.shadow.len() != params.num_storages() {
            return Err(Error::Dim("EMA shadow count does not match storages".into()));
        }
        for (shadow, storage) in self.shadow.iter_mut().zip(params.storages_mut()) {
            if shadow.len() != storage.numel() {
                return Err(Error::Dim(format!("EMA shadow shape drifted for {}", storage.path)));
            }
            std::mem::swap(shadow, &mut storage.data);
        }
        Ok(())
    }
}
