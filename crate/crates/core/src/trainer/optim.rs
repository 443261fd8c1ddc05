//! Adam with decoupled weight decay, over named f32 parameter tensors.
//!
//! Moment buffers live in f32 like the parameters themselves; the update
//! arithmetic runs in f64 and rounds once at the end. Training state is
//! therefore exactly reconstructible from checkpointed f32 tensors.

use std::collections::BTreeMap;

use crate::graph::GradStore;
use crate::model::{Model, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            step_size: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-6,
            weight_decay: 0.0,
        }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    m: ParamStore,
    v: ParamStore,
    step: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            m: ParamStore::new(),
            v: ParamStore::new(),
            step: 0,
        }
    }

    /// Applies one update to every `(name, gradient)` pair. Unmentioned
    /// parameters are untouched.
    pub fn step(&mut self, model: &mut Model, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.cfg.beta1.powi(t);
        let bias2 = 1.0 - self.cfg.beta2.powi(t);
        for (name, grad) in grads {
            let param = model
                .params
                .get_mut(name)
                .expect("gradient for unknown parameter");
            if !self.m.contains(name) {
                self.m
                    .insert(name.clone(), crate::model::Param::zeros(param.rows, param.cols));
                self.v
                    .insert(name.clone(), crate::model::Param::zeros(param.rows, param.cols));
            }
            let m = self.m.get_mut(name).expect("moment buffer");
            let v = self.v.get_mut(name).expect("moment buffer");
            for i in 0..param.data.len() {
                let g = grad.data()[i];
                let mi = self.cfg.beta1 * m.data[i] as f64 + (1.0 - self.cfg.beta1) * g;
                let vi = self.cfg.beta2 * v.data[i] as f64 + (1.0 - self.cfg.beta2) * g * g;
                m.data[i] = mi as f32;
                v.data[i] = vi as f32;
                let m_hat = m.data[i] as f64 / bias1;
                let v_hat = v.data[i] as f64 / bias2;
                let mut p = param.data[i] as f64;
                p -= self.cfg.step_size * (m_hat / (v_hat.sqrt() + self.cfg.epsilon));
                if self.cfg.weight_decay > 0.0 {
                    p -= self.cfg.step_size * self.cfg.weight_decay * param.data[i] as f64;
                }
                param.data[i] = p as f32;
            }
        }
    }
}

/// Collects leaf gradients from a backward pass into name-keyed tensors,
/// restricted to parameters the phase actually trains.
pub fn collect_gradients(
    model: &Model,
    bound: &crate::model::BoundParams,
    grads: &GradStore,
    trainable: &dyn Fn(&str) -> bool,
) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    for (name, _) in model.params.iter() {
        if !trainable(name) {
            continue;
        }
        let node = bound.node(name);
        if let Some(g) = grads.get(node) {
            out.insert(name.to_string(), g.clone());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};

    fn tiny_model() -> Model {
        Model::init(
            ModelConfig {
                dim: 4,
                enc_layers: 1,
                dec_layers: 1,
                heads: 1,
                id_len: 1,
                codebook_sizes: vec![2],
                vocab_size: 4,
                max_doc_len: 4,
                recon_layers: 1,
                dropout: 0.0,
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut model = tiny_model();
        let before = model.params.get("dec.bos").unwrap().data.clone();
        let mut grads = BTreeMap::new();
        grads.insert(
            "dec.bos".to_string(),
            Tensor::row_vector(vec![1.0, 1.0, -1.0, 0.0]),
        );
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut model, &grads);
        let after = &model.params.get("dec.bos").unwrap().data;
        assert!(after[0] < before[0]);
        assert!(after[1] < before[1]);
        assert!(after[2] > before[2]);
        assert_eq!(after[3], before[3]);
    }

    #[test]
    fn untouched_parameters_stay_bitwise_identical() {
        let mut model = tiny_model();
        let before = model.params.get("tok_emb").unwrap().data.clone();
        let mut grads = BTreeMap::new();
        grads.insert(
            "dec.bos".to_string(),
            Tensor::row_vector(vec![1.0, 0.0, 0.0, 0.0]),
        );
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut model, &grads);
        assert_eq!(before, model.params.get("tok_emb").unwrap().data);
    }
}
