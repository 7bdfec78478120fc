use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tensor};

/// Learning rates of the three parameter groups.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearningRates {
    /// Visual and language stubs (`vis.*`, `lang.*`).
    pub stubs: f64,
    /// Visuo-linguistic encoder and grounding heads (`vl.*`).
    pub vl: f64,
    /// Everything else: context encoder, pack decoder, fixation heads.
    pub rest: f64,
}

impl LearningRates {
    pub fn uniform(lr: f64) -> Self {
        Self { stubs: lr, vl: lr, rest: lr }
    }

    pub fn for_param(&self, name: &str) -> f64 {
        if name.starts_with("vis.") || name.starts_with("lang.") {
            self.stubs
        } else if name.starts_with("vl.") {
            self.vl
        } else {
            self.rest
        }
    }

    pub(crate) fn all(&self) -> [f64; 3] {
        [self.stubs, self.vl, self.rest]
    }
}

/// Adam with decoupled weight decay. Moments live in the parameter slots.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0 }
    }

    /// One update from `grads`; parameters without a gradient keep their
    /// moments and values.
    pub fn update(&mut self, store: &mut ParamStore, grads: &IndexMap<String, Tensor<f32>>, lr: &LearningRates) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, p) in store.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let rate = lr.for_param(name);
            if p.slots.is_empty() {
                p.slots = vec![Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())];
            }
            let (m, rest) = p.slots.split_at_mut(1);
            let (m, v) = (m[0].data_mut(), rest[0].data_mut());
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let gi = g.data()[i] as f64;
                let mi = self.beta1 * m[i] as f64 + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v[i] as f64 + (1.0 - self.beta2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                if rate == 0.0 {
                    continue;
                }
                let wf = *w as f64;
                let adam = (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                *w = (wf - rate * (adam + self.weight_decay * wf)) as f32;
            }
        }
    }
}

/// Global L2 norm of a gradient set.
pub fn global_norm(grads: &IndexMap<String, Tensor<f32>>) -> f64 {
    grads.values().map(|g| g.norm().powi(2)).sum::<f64>().sqrt()
}

/// Scales gradients down to `max_norm` when their global norm exceeds it.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut IndexMap<String, Tensor<f32>>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = ParamStore::new();
        s.insert("head.w", Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap()).unwrap();
        s.insert("vis.w", Tensor::matrix(1, 1, vec![1.0]).unwrap()).unwrap();
        let mut grads = IndexMap::new();
        grads.insert("head.w".to_string(), Tensor::matrix(1, 2, vec![0.5, -2.0]).unwrap());
        grads.insert("vis.w".to_string(), Tensor::matrix(1, 1, vec![3.0]).unwrap());
        let mut opt = AdamW::new(0.0);
        let lr = LearningRates { stubs: 0.0, vl: 0.0, rest: 0.1 };
        opt.update(&mut s, &grads, &lr);
        // Bias-corrected first Adam step is lr · sign(g).
        let w = s.get("head.w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
        assert_eq!(s.get("vis.w").unwrap().data(), &[1.0]);
    }

    #[test]
    fn decoupled_decay_without_gradient_signal() {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::matrix(1, 1, vec![2.0]).unwrap()).unwrap();
        let mut grads = IndexMap::new();
        grads.insert("x".to_string(), Tensor::matrix(1, 1, vec![0.0]).unwrap());
        let mut opt = AdamW::new(0.5);
        opt.update(&mut s, &grads, &LearningRates::uniform(0.1));
        assert!((s.get("x").unwrap().data()[0] - 1.9).abs() < 1e-6);
    }

    #[test]
    fn clipping() {
        let mut grads = IndexMap::new();
        grads.insert("a".to_string(), Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap());
        assert_eq!(clip_global_norm(&mut grads, 1.0), 5.0);
        assert!((global_norm(&grads) - 1.0).abs() < 1e-6);
        assert_eq!(clip_global_norm(&mut grads, 2.0), global_norm(&grads));
    }
}
