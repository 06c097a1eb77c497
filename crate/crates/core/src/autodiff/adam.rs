use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(1e-3)
    }
}

/// Moment accumulators, one pair of buffers per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub hyper: Adam,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(hyper: Adam, params: &[&Tensor]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.len()]).collect();
        AdamState {
            hyper,
            first_moment: zeros(),
            second_moment: zeros(),
            step_count: 0,
        }
    }

    /// One bias-corrected update. Parameters without a gradient slot are
    /// treated as having zero gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if params.len() != self.first_moment.len() {
            return Err(Error::Dimension(format!(
                "optimizer tracks {} tensors, got {}",
                self.first_moment.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.len() != self.first_moment[i].len() {
                return Err(Error::Dimension(format!(
                    "parameter {i} has {} entries, moments have {}",
                    p.len(),
                    self.first_moment[i].len()
                )));
            }
        }

        self.step_count += 1;
        let Adam {
            lr,
            beta1,
            beta2,
            eps,
        } = self.hyper;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        if lr == 0.0 {
            // moments still advance so a later lr change sees a consistent history
            for (i, p) in params.iter().enumerate() {
                let g = p
                    .grad()
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; p.len()]);
                self.update_moments(i, &g);
            }
            return Ok(());
        }

        for (i, p) in params.iter_mut().enumerate() {
            let g = p
                .grad()
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.len()]);
            self.update_moments(i, &g);
            let (m, v) = (&self.first_moment[i], &self.second_moment[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    fn update_moments(&mut self, i: usize, g: &[f64]) {
        let Adam { beta1, beta2, .. } = self.hyper;
        for ((m, v), &gj) in self.first_moment[i]
            .iter_mut()
            .zip(self.second_moment[i].iter_mut())
            .zip(g)
        {
            *m = beta1 * *m + (1.0 - beta1) * gj;
            *v = beta2 * *v + (1.0 - beta2) * gj * gj;
        }
    }
}
