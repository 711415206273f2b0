use serde::{Deserialize, Serialize};

use super::nn::{ParamId, ParamStore};
use super::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Moments { m: vec![0.0; n], v: vec![0.0; n] }
    }
}

/// One bias-corrected Adam update; `step` is 1-based.
pub fn adam_step(param: &mut [f64], grad: &[f64], state: &mut Moments, step: u64, hp: &AdamHyper) -> Result<()> {
    if !(hp.lr > 0.0) {
        return Err(TensorError::Config(format!("learning rate must be positive, got {}", hp.lr)));
    }
    if param.len() != grad.len() || state.m.len() != param.len() || state.v.len() != param.len() {
        return Err(super::dim_err("adam_step", "param/grad/state lengths differ"));
    }
    if step == 0 {
        return Err(TensorError::Contract("adam step counter starts at 1".into()));
    }
    let bc1 = 1.0 - hp.beta1.powi(step as i32);
    let bc2 = 1.0 - hp.beta2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        param[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
    Ok(())
}

/// Adam over every trainable entry of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub hyper: AdamHyper,
    pub step: u64,
    moments: Vec<Moments>,
}

impl Adam {
    pub fn new(store: &ParamStore, hyper: AdamHyper) -> Self {
        let moments = store.ids().map(|id| Moments::zeros(store.value(id).len())).collect();
        Adam { hyper, step: 0, moments }
    }

    pub fn moments(&self, id: ParamId) -> &Moments {
        &self.moments[id.index()]
    }

    pub fn moments_mut(&mut self, id: ParamId) -> &mut Moments {
        &mut self.moments[id.index()]
    }

    /// Applies the stored gradients at learning rate `lr`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        self.step += 1;
        let hp = AdamHyper { lr, ..self.hyper };
        let ids: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
        for id in ids {
            let grad = store.grad(id).data().to_vec();
            let state = &mut self.moments[id.index()];
            adam_step(store.value_mut(id).data_mut(), &grad, state, self.step, &hp)?;
        }
        Ok(())
    }

    /// Optimizer state as checkpoint entries under `prefix`.
    pub fn export(&self, store: &ParamStore, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = vec![(format!("{prefix}.step"), Tensor::scalar(self.step as f64))];
        for id in store.ids().filter(|&id| store.is_trainable(id)) {
            let Moments { m, v } = &self.moments[id.index()];
            let shape = store.value(id).shape().to_vec();
            out.push((format!("{prefix}.m.{}", store.name(id)), Tensor { shape: shape.clone(), data: m.clone() }));
            out.push((format!("{prefix}.v.{}", store.name(id)), Tensor { shape, data: v.clone() }));
        }
        out
    }

    pub fn import(&mut self, store: &ParamStore, prefix: &str, lookup: impl Fn(&str) -> Option<Tensor>) -> Result<()> {
        let missing = |k: &str| TensorError::Contract(format!("checkpoint lacks {k}"));
        let key = format!("{prefix}.step");
        self.step = lookup(&key).ok_or_else(|| missing(&key))?.data()[0] as u64;
        for id in store.ids().filter(|&id| store.is_trainable(id)) {
            let mk = format!("{prefix}.m.{}", store.name(id));
            let vk = format!("{prefix}.v.{}", store.name(id));
            let m = lookup(&mk).ok_or_else(|| missing(&mk))?.into_data();
            let v = lookup(&vk).ok_or_else(|| missing(&vk))?.into_data();
            if m.len() != store.value(id).len() || v.len() != m.len() {
                return Err(super::dim_err("Adam::import", format!("moment size for {}", store.name(id))));
            }
            self.moments[id.index()] = Moments { m, v };
        }
        Ok(())
    }
}

/// Learning-rate policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant(f64),
    /// Cosine warm-up from `max_lr / div_factor` to `max_lr` over the first
    /// `pct_start` of training, then cosine annealing to
    /// `max_lr / (div_factor * final_div)`.
    OneCycle {
        max_lr: f64,
        total_steps: u64,
        pct_start: f64,
        div_factor: f64,
        final_div: f64,
    },
}

impl LrSchedule {
    pub fn one_cycle(max_lr: f64, total_steps: u64) -> Self {
        LrSchedule::OneCycle { max_lr, total_steps, pct_start: 0.4, div_factor: 10.0, final_div: 1e4 }
    }

    /// Learning rate for the 0-based step index.
    pub fn lr_at(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant(lr) => lr,
            LrSchedule::OneCycle { max_lr, total_steps, pct_start, div_factor, final_div } => {
                let cos = |from: f64, to: f64, frac: f64| to + (from - to) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
                let start = max_lr / div_factor;
                let end = start / final_div;
                let warm = ((total_steps as f64) * pct_start).max(1.0);
                let s = step as f64;
                if s < warm {
                    cos(start, max_lr, s / warm)
                } else {
                    let rest = (total_steps as f64 - warm).max(1.0);
                    cos(max_lr, end, ((s - warm) / rest).min(1.0))
                }
            }
        }
    }
}
