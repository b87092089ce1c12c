//! Adaptive-moment optimizers.

use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::model::ParamStore;
use crate::tape::GradientMap;
use crate::tensor::Tensor;

/// Adam; with `decoupled` the weight decay is applied to the parameters
/// directly (AdamW) instead of being added to the gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub base_lr: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decoupled: bool,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        Self {
            base_lr: lr,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            decoupled: false,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn adamw(params: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        Self {
            weight_decay,
            decoupled: true,
            ..Self::new(params, lr)
        }
    }

    /// Multiplicative per-epoch decay: `lr = base_lr * decay^epoch`.
    pub fn schedule(&mut self, epoch: usize, decay: f64) {
        self.lr = self.base_lr * libm::pow(decay, epoch as f64);
    }

    /// One update. Parameters without a gradient are treated as having a
    /// zero gradient (their moments still decay).
    pub fn step(&mut self, params: &mut ParamStore, grads: &GradientMap) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(shape_err("adam", "optimizer built for another parameter set".into()));
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - libm::pow(self.beta1, t);
        let bc2 = 1.0 - libm::pow(self.beta2, t);
        for id in params.ids().collect::<Vec<_>>() {
            let k = id.0;
            let g = grads.get(&id);
            let p = params.get_mut(id);
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(shape_err("adam", "gradient shape".into()));
                }
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for j in 0..p.len() {
                let w = p.data()[j];
                let mut gj = g.map_or(0.0, |g| g.data()[j]);
                if !self.decoupled && self.weight_decay != 0.0 {
                    gj += self.weight_decay * w;
                }
                let mj = self.beta1 * m.data()[j] + (1.0 - self.beta1) * gj;
                let vj = self.beta2 * v.data()[j] + (1.0 - self.beta2) * gj * gj;
                m.data_mut()[j] = mj;
                v.data_mut()[j] = vj;
                let mut nw = w;
                if self.decoupled && self.weight_decay != 0.0 {
                    nw -= self.lr * self.weight_decay * w;
                }
                nw -= self.lr * (mj / bc1) / (libm::sqrt(vj / bc2) + self.eps);
                p.data_mut()[j] = nw;
            }
        }
        Ok(())
    }
}
