use alloc::vec;
use alloc::vec::Vec;

use crate::numkit::ParamSet;

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of `params` using `grads`, which must have the same layout.
    pub fn step<P: ParamSet>(&mut self, params: &mut P, grads: &P) {
        let n = params.param_count();
        if self.m.len() != n {
            self.m = vec![0.0; n];
            self.v = vec![0.0; n];
            self.t = 0;
        }
        self.t += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        let mut off = 0;
        for (p, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
            for (w, &gi) in p.data_mut().iter_mut().zip(g.data()) {
                let m = &mut self.m[off];
                let v = &mut self.v[off];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= self.lr * self.weight_decay * *w;
                *w -= self.lr * mhat / (libm::sqrt(vhat) + self.eps);
                off += 1;
            }
        }
    }
}
