//! Deterministic optimizers for the desk-scale training loops.

use std::collections::BTreeMap;

use crate::numcore::Tensor;

/// Plain SGD with a cosine-decayed learning rate over a fixed horizon.
#[derive(Debug, Clone)]
pub struct SgdCosine {
    pub base_lr: f64,
    pub total_steps: usize,
    step: usize,
}

impl SgdCosine {
    pub fn new(base_lr: f64, total_steps: usize) -> Self {
        SgdCosine {
            base_lr,
            total_steps,
            step: 0,
        }
    }

    pub fn current_lr(&self) -> f64 {
        if self.total_steps <= 1 {
            return self.base_lr;
        }
        let t = self.step as f64 / (self.total_steps - 1) as f64;
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }

    pub fn apply(&self, value: &mut Tensor, grad: &Tensor) {
        let lr = self.current_lr();
        for (v, &g) in value.data_mut().iter_mut().zip(grad.data()) {
            *v -= lr * g;
        }
    }

    pub fn advance(&mut self) {
        self.step += 1;
    }
}

/// Adam with bias correction; per-parameter moment state keyed by name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Advances the shared step counter; call once per optimization step
    /// before applying parameter updates.
    pub fn advance(&mut self) {
        self.t += 1;
    }

    pub fn apply(&mut self, name: &str, value: &mut Tensor, grad: &Tensor, lr_scale: f64) {
        let n = value.numel();
        let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let lr = self.lr * lr_scale;
        for i in 0..n {
            let g = grad.data()[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            value.data_mut()[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        let mut s = SgdCosine::new(1.0, 11);
        assert!((s.current_lr() - 1.0).abs() < 1e-12);
        for _ in 0..10 {
            s.advance();
        }
        assert!(s.current_lr() < 1e-12);
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut a = Adam::new(0.1);
        let mut x = Tensor::scalar(1.0);
        let g = Tensor::scalar(2.0);
        a.advance();
        a.apply("x", &mut x, &g, 1.0);
        assert!(x.scalar_value() < 1.0);
    }
}
