//! Adam with default moment coefficients, keyed by parameter name.

use std::collections::BTreeMap;

use crate::tensor::Mat;

pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    moments: BTreeMap<String, (Mat, Mat, usize)>, // (m, v, t)
}

impl Adam {
    pub fn new() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            moments: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, name: &str, param: &mut Mat, grad: &Mat, lr: f64) {
        debug_assert_eq!(param.shape(), grad.shape());
        let (m, v, t) = self.moments.entry(name.to_string()).or_insert_with(|| {
            (
                Mat::zeros(param.rows(), param.cols()),
                Mat::zeros(param.rows(), param.cols()),
                0,
            )
        });
        *t += 1;
        let b1t = 1.0 - self.beta1.powi(*t as i32);
        let b2t = 1.0 - self.beta2.powi(*t as i32);
        for i in 0..param.len() {
            let g = grad.data()[i];
            let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * g;
            let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * g * g;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let mhat = mi / b1t;
            let vhat = vi / b2t;
            param.data_mut()[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}
