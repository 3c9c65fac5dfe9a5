use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::ParamStore;

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            steps: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update from the gradients stored on `params`. Every
    /// parameter must carry a gradient.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if let Some((name, _)) = params.iter().find(|(_, t)| t.grad().is_none()) {
            return Err(Error::MissingGrad(name.to_string()));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let grad = p.grad().expect("checked above").to_vec();
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            for (((x, g), m), v) in p.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *x -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
