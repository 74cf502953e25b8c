//! Adam with L2 weight decay folded into the gradient, and the step-decay
//! learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{GradBuffer, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Moment estimates live in two parameter stores mirroring the model's
/// layout, so they persist with the same manifest format.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

fn zeros_like(store: &ParamStore) -> ParamStore {
    let mut out = ParamStore::new();
    for (_, name, t) in store.iter() {
        out.add(name, Tensor::zeros(t.shape()));
    }
    out
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamStore) -> Self {
        Self {
            cfg,
            step: 0,
            m: zeros_like(params),
            v: zeros_like(params),
        }
    }

    pub fn from_state(
        cfg: AdamConfig,
        step: u64,
        m: ParamStore,
        v: ParamStore,
        params: &ParamStore,
    ) -> Result<Self> {
        let layout = |s: &ParamStore| {
            s.iter()
                .map(|(_, n, t)| (n.to_owned(), t.shape().to_vec()))
                .collect::<Vec<_>>()
        };
        if layout(&m) != layout(params) || layout(&v) != layout(params) {
            return Err(Error::Format(
                "optimizer state does not match the parameter layout".into(),
            ));
        }
        Ok(Self { cfg, step, m, v })
    }

    /// Applies one update with learning rate `lr`. Parameters whose
    /// gradient is identically zero still receive decay and moment updates.
    pub fn update(&mut self, params: &mut ParamStore, grads: &GradBuffer, lr: f64) {
        let lrs = vec![lr; params.len()];
        self.update_with_lrs(params, grads, &lrs);
    }

    /// As [`Adam::update`] with one learning rate per parameter, in store
    /// order.
    pub fn update_with_lrs(&mut self, params: &mut ParamStore, grads: &GradBuffer, lrs: &[f64]) {
        assert_eq!(lrs.len(), params.len(), "one learning rate per parameter");
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let lr = lrs[id.index()];
            let g = grads.get(id);
            let m = self.m.get_mut(id).data_mut();
            let v = self.v.get_mut(id).data_mut();
            let w = params.get_mut(id).data_mut();
            for i in 0..w.len() {
                let gi = g[i] + self.cfg.weight_decay * w[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                w[i] -= lr * mh / (vh.sqrt() + self.cfg.eps);
            }
        }
    }
}

/// Learning rate at `epoch`: `base * factor^k` where `k` counts the decay
/// epochs already reached.
pub fn lr_at(base: f64, epoch: usize, decay_epochs: &[usize], factor: f64) -> f64 {
    let k = decay_epochs.iter().filter(|&&e| epoch >= e).count();
    base * factor.powi(k as i32)
}

/// Rescales decay epochs given for `reference` total epochs to `epochs`.
pub fn scale_decay_epochs(decay: &[usize], reference: usize, epochs: usize) -> Vec<usize> {
    decay
        .iter()
        .map(|&e| ((e as f64) * epochs as f64 / reference as f64).round() as usize)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_halves_at_decay_epochs() {
        let d = [20, 30];
        assert_eq!(lr_at(1e-4, 0, &d, 0.5), 1e-4);
        assert_eq!(lr_at(1e-4, 20, &d, 0.5), 5e-5);
        assert_eq!(lr_at(1e-4, 35, &d, 0.5), 2.5e-5);
        assert_eq!(scale_decay_epochs(&d, 50, 30), vec![12, 18]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
        let mut opt = Adam::new(
            AdamConfig {
                weight_decay: 0.0,
                ..AdamConfig::default()
            },
            &store,
        );
        let mut g = GradBuffer::zeros_like(&store);
        g.0[0] = vec![3.0, -0.5];
        opt.update(&mut store, &g, 0.1);
        let w = store.get(id).data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
    }
}
