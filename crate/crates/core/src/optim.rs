//! Adam optimizer over the model's trainable parameters.
//!
//! Moment state lives in f64 alongside the f64 master parameters; frozen
//! parameters are never touched, whatever gradients arrive for them.

use crate::config::TrainConfig;
use crate::model::Model;
use ndarray::Array2;

pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(model: &Model, config: &TrainConfig) -> Self {
        let m = model
            .params
            .iter()
            .map(|p| Array2::zeros(p.value.raw_dim()))
            .collect();
        let v = model
            .params
            .iter()
            .map(|p| Array2::zeros(p.value.raw_dim()))
            .collect();
        Self {
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: 1e-8,
            weight_decay: config.weight_decay,
            t: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Moments of the trainable parameters, for checkpointing.
    pub fn export_state(&self, model: &Model) -> crate::checkpoint::OptimizerState {
        let entries = model
            .params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.trainable)
            .map(|(i, p)| (p.name.clone(), self.m[i].clone(), self.v[i].clone()))
            .collect();
        crate::checkpoint::OptimizerState { entries }
    }

    /// Restores moments by name; `t` comes from the model's step counter.
    pub fn import_state(&mut self, model: &Model, state: &crate::checkpoint::OptimizerState) {
        for (name, m, v) in &state.entries {
            if let Some(i) = model.param_index(name) {
                self.m[i] = m.clone();
                self.v[i] = v.clone();
            }
        }
        self.t = model.step;
    }

    /// Applies one update. `grads[i]` pairs with `model.params[i]`; `None`
    /// (parameter untouched by the graph) counts as a zero gradient.
    pub fn step(&mut self, model: &mut Model, grads: &[Option<Array2<f64>>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, param) in model.params.iter_mut().enumerate() {
            if !param.trainable {
                continue;
            }
            let Some(grad) = grads[i].as_ref() else { continue };
            debug_assert_eq!(grad.dim(), param.value.dim());
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for ((pv, gv), (mv, vv)) in param
                .value
                .iter_mut()
                .zip(grad.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                let g = if self.weight_decay != 0.0 {
                    *gv + self.weight_decay * *pv
                } else {
                    *gv
                };
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * g;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * g * g;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        model.step += 1;
    }
}
