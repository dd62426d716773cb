use serde::{Deserialize, Serialize};

use crate::error::{Result, SconeError};

use super::Matrix;

/// Bias-corrected Adam moments for an ordered list of parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl AdamState {
    pub fn new(shapes: impl IntoIterator<Item = (usize, usize)>, learning_rate: f64, beta1: f64, beta2: f64) -> Self {
        let (first, second): (Vec<_>, Vec<_>) = shapes
            .into_iter()
            .map(|(r, c)| (Matrix::zeros(r, c), Matrix::zeros(r, c)))
            .unzip();
        AdamState {
            learning_rate,
            beta1,
            beta2,
            epsilon: 1e-8,
            step: 0,
            first,
            second,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> &Matrix {
        &self.first[i]
    }

    pub fn second_moment(&self, i: usize) -> &Matrix {
        &self.second[i]
    }

    /// Applies one update. Nothing is modified when any gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(SconeError::Dimension(format!(
                "adam tracks {} parameters, got {} parameters and {} gradients",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.first[i].shape() || g.shape() != self.first[i].shape() {
                return Err(SconeError::Dimension(format!(
                    "parameter {i}: moment {:?}, parameter {:?}, gradient {:?}",
                    self.first[i].shape(),
                    p.shape(),
                    g.shape()
                )));
            }
            if !g.is_finite() {
                return Err(SconeError::Domain(format!(
                    "non-finite gradient for parameter {i} at step {}",
                    self.step + 1
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let p = p.as_mut_slice();
            let (m, v) = (m.as_mut_slice(), v.as_mut_slice());
            for (idx, &gv) in g.as_slice().iter().enumerate() {
                m[idx] = b1 * m[idx] + (1.0 - b1) * gv;
                v[idx] = b2 * v[idx] + (1.0 - b2) * gv * gv;
                let m_hat = m[idx] / c1;
                let v_hat = v[idx] / c2;
                p[idx] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_and_decays_moments() {
        let mut p = Matrix::filled(2, 2, 3.0);
        let mut adam = AdamState::new([(2, 2)], 1e-3, 0.9, 0.999);
        adam.step(&mut [&mut p], &[Matrix::filled(2, 2, 1.0)]).unwrap();
        let after_one = p.clone();
        let m1 = adam.first_moment(0).max_abs();
        adam.step(&mut [&mut p], &[Matrix::zeros(2, 2)]).unwrap();
        assert!(adam.first_moment(0).max_abs() < m1);
        // Zero gradients from zero moments never move anything.
        let mut q = Matrix::filled(1, 3, -1.0);
        let mut fresh = AdamState::new([(1, 3)], 1e-3, 0.9, 0.999);
        for _ in 0..5 {
            fresh.step(&mut [&mut q], &[Matrix::zeros(1, 3)]).unwrap();
        }
        assert_eq!(q, Matrix::filled(1, 3, -1.0));
        assert_eq!(fresh.first_moment(0), &Matrix::zeros(1, 3));
        assert_ne!(after_one, Matrix::filled(2, 2, 3.0));
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let lr = 1e-4;
        let g = Matrix::new(1, 3, vec![0.5, -2.0, 1e-3]).unwrap();
        let mut p = Matrix::zeros(1, 3);
        let mut adam = AdamState::new([(1, 3)], lr, 0.9, 0.999);
        adam.step(&mut [&mut p], &[g.clone()]).unwrap();
        for (pv, gv) in p.as_slice().iter().zip(g.as_slice()) {
            // m_hat = g, v_hat = g^2 after bias correction.
            let expected = -lr * gv / (gv.abs() + 1e-8);
            assert!((pv - expected).abs() < 1e-15);
            assert!((pv + lr * gv.signum()).abs() < 1e-8 * lr / gv.abs() + 1e-15);
        }
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn constant_gradient_reaches_fixed_step_size() {
        let lr = 1e-2;
        let mut p = Matrix::zeros(1, 2);
        let g = Matrix::new(1, 2, vec![3.0, -0.25]).unwrap();
        let mut adam = AdamState::new([(1, 2)], lr, 0.9, 0.999);
        let mut prev = p.clone();
        for _ in 0..200 {
            adam.step(&mut [&mut p], &[g.clone()]).unwrap();
            let delta = p.sub(&prev).unwrap();
            for (d, gv) in delta.as_slice().iter().zip(g.as_slice()) {
                assert!((d + lr * gv.signum()).abs() < 1e-8);
            }
            prev = p.clone();
        }
    }

    #[test]
    fn nan_gradient_is_rejected_without_update() {
        let mut p = Matrix::zeros(1, 1);
        let mut adam = AdamState::new([(1, 1)], 1e-3, 0.9, 0.999);
        let err = adam.step(&mut [&mut p], &[Matrix::scalar(f64::NAN)]);
        assert!(matches!(err, Err(SconeError::Domain(_))));
        assert_eq!(adam.step_count(), 0);
    }
}
