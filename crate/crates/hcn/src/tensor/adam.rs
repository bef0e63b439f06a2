//! Adam optimizer with bias correction.

use super::ParamSet;

/// Per-parameter first/second moment state plus the shared step counter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update from the gradients currently stored in `params`.
    pub fn step(&mut self, params: &mut ParamSet) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let pid = super::ParamId(i);
            let numel = params.tensor(pid).numel();
            if self.m.len() <= i {
                self.m.push(vec![0.0; numel]);
                self.v.push(vec![0.0; numel]);
            }
            let t = params.tensor_mut(pid);
            let Some(grad) = t.grad() else { continue };
            let grad = grad.to_vec();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let data = t.data_mut();
            for j in 0..numel {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                data[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
