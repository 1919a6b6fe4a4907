use serde::{Deserialize, Serialize};

use super::state::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { lr: 0.08, momentum: 0.9, weight_decay: 1e-4 }
    }
}

/// Classical momentum with L2 decay folded into the gradient:
/// `v = momentum * v + g + wd * w; w -= lr * v`.
pub fn sgd_step(params: &mut ParamStore, cfg: &SgdConfig) {
    for p in params.iter_mut().filter(|p| p.trainable) {
        let w = p.value.data_mut();
        let v = p.velocity.data_mut();
        for ((w, v), g) in w.iter_mut().zip(v.iter_mut()).zip(p.grad.data()) {
            *v = cfg.momentum * *v + g + cfg.weight_decay * *w;
            *w -= cfg.lr * *v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::micro_tensor::Tensor4;

    #[test]
    fn defaults() {
        let c = SgdConfig::default();
        assert_eq!((c.momentum, c.weight_decay), (0.9, 1e-4));
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = ParamStore::new();
        p.add("w", Tensor4::filled([1, 2, 1, 1], 0.7), true);
        let before = p.clone();
        for _ in 0..3 {
            sgd_step(&mut p, &SgdConfig { lr: 0.5, momentum: 0.9, weight_decay: 0.0 });
        }
        assert_eq!(p, before);
    }

    #[test]
    fn two_step_scalar_recurrence() {
        // loss = w^2, so g = 2w; w0 = 1, lr 0.1, momentum 0.9, wd 0.01
        // v1 = 2 + 0.01 = 2.01, w1 = 0.799
        // v2 = 0.9 * 2.01 + 1.598 + 0.00799 = 3.41499, w2 = 0.457501
        let cfg = SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.01 };
        let mut p = ParamStore::new();
        let id = p.add("w", Tensor4::filled([1, 1, 1, 1], 1.0), true);
        for _ in 0..2 {
            let w = p.get(id).value.data()[0];
            p.get_mut(id).grad.data_mut()[0] = 2.0 * w;
            sgd_step(&mut p, &cfg);
        }
        assert!((p.get(id).value.data()[0] - 0.457501).abs() < 1e-12);
        assert!((p.get(id).velocity.data()[0] - 3.41499).abs() < 1e-12);
    }

    #[test]
    fn frozen_params_are_untouched() {
        let mut p = ParamStore::new();
        let id = p.add("stat", Tensor4::filled([1, 1, 1, 1], 1.0), false);
        p.get_mut(id).grad.data_mut()[0] = 5.0;
        sgd_step(&mut p, &SgdConfig::default());
        assert_eq!(p.get(id).value.data()[0], 1.0);
    }
}
