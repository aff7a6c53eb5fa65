use serde::{Deserialize, Serialize};

use crate::matrix::DenseMatrix;

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected first and second moments.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: i32,
    m: Vec<DenseMatrix>,
    v: Vec<DenseMatrix>,
}

impl Adam {
    pub fn new(config: AdamConfig, shapes: &[(usize, usize)]) -> Self {
        Self {
            config,
            step: 0,
            m: shapes.iter().map(|&(r, c)| DenseMatrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| DenseMatrix::zeros(r, c)).collect(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// `params[i]` and `grads[i]` must have the shape given at construction.
    pub fn update(&mut self, params: &mut [&mut DenseMatrix], grads: &[DenseMatrix]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            for (mj, gj) in m.iter_mut().zip(g) {
                *mj = c.beta1 * *mj + (1.0 - c.beta1) * gj;
            }
            let v = self.v[i].data_mut();
            for (vj, gj) in v.iter_mut().zip(g) {
                *vj = c.beta2 * *vj + (1.0 - c.beta2) * gj * gj;
            }
            let (m, v) = (self.m[i].data(), self.v[i].data());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w -= c.learning_rate * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut w = DenseMatrix::row_vector(&[1.0, -2.0]);
        let mut adam = Adam::new(AdamConfig::default(), &[(1, 2)]);
        adam.update(&mut [&mut w], &[DenseMatrix::row_vector(&[0.5, -3.0])]);
        assert!((w.get(0, 0) - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((w.get(0, 1) - (-2.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut w = DenseMatrix::row_vector(&[3.0, -4.0]);
        let mut adam = Adam::new(
            AdamConfig {
                learning_rate: 0.05,
                ..Default::default()
            },
            &[(1, 2)],
        );
        for _ in 0..2000 {
            let g = w.map(|x| 2.0 * x);
            adam.update(&mut [&mut w], &[g]);
        }
        assert!(w.data().iter().all(|x| x.abs() < 1e-3), "{w:?}");
    }
}
