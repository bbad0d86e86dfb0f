//! AdamW parameter updates: adaptive moments with bias correction and
//! weight decay applied multiplicatively to the value, not through the
//! gradient.

use crate::error::{Error, Result};
use crate::numcore::Matrix;

#[derive(Debug, Clone)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 5e-4,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter.
#[derive(Debug, Clone)]
pub struct Moments {
    pub m: Matrix,
    pub v: Matrix,
}

impl Moments {
    pub fn zeros_like(value: &Matrix) -> Self {
        Moments {
            m: Matrix::zeros(value.rows(), value.cols()),
            v: Matrix::zeros(value.rows(), value.cols()),
        }
    }
}

/// One decoupled-weight-decay update. `step` is 1-based and shared across
/// all parameters of a training step.
pub fn adamw_step(
    value: &mut Matrix,
    grad: &Matrix,
    moments: &mut Moments,
    step: usize,
    cfg: &AdamWConfig,
) -> Result<()> {
    if (grad.rows(), grad.cols()) != (value.rows(), value.cols()) {
        return Err(Error::Shape(format!(
            "adamw: grad {}x{} for value {}x{}",
            grad.rows(),
            grad.cols(),
            value.rows(),
            value.cols()
        )));
    }
    if step == 0 {
        return Err(Error::Invalid("adamw step count must be >= 1".into()));
    }
    grad.ensure_finite("adamw gradient")?;

    let bias1 = 1.0 - cfg.beta1.powi(step as i32);
    let bias2 = 1.0 - cfg.beta2.powi(step as i32);
    let decay = 1.0 - cfg.learning_rate * cfg.weight_decay;

    for i in 0..value.data().len() {
        let g = grad.data()[i];
        let m = cfg.beta1 * moments.m.data()[i] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * moments.v.data()[i] + (1.0 - cfg.beta2) * g * g;
        moments.m.data_mut()[i] = m;
        moments.v.data_mut()[i] = v;
        let m_hat = m / bias1;
        let v_hat = v / bias2;
        let x = value.data()[i] * decay;
        value.data_mut()[i] = x - cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_zero_decay_is_a_fixed_point() {
        let mut value = Matrix::from_rows(&[vec![1.0, -2.0]]).unwrap();
        let grad = Matrix::zeros(1, 2);
        let mut moments = Moments::zeros_like(&value);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let before = value.clone();
        for step in 1..=5 {
            adamw_step(&mut value, &grad, &mut moments, step, &cfg).unwrap();
        }
        assert_eq!(value, before);
    }

    #[test]
    fn zero_gradient_decays_multiplicatively() {
        let mut value = Matrix::from_rows(&[vec![2.0]]).unwrap();
        let grad = Matrix::zeros(1, 1);
        let mut moments = Moments::zeros_like(&value);
        let cfg = AdamWConfig {
            learning_rate: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        adamw_step(&mut value, &grad, &mut moments, 1, &cfg).unwrap();
        assert!((value.get(0, 0) - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-15);
        adamw_step(&mut value, &grad, &mut moments, 2, &cfg).unwrap();
        assert!((value.get(0, 0) - 2.0 * 0.95f64.powi(2)).abs() < 1e-15);
    }

    #[test]
    fn single_step_matches_hand_computation() {
        // Quadratic f(x) = x^2 / 2 at x = 3: gradient 3.
        let mut value = Matrix::from_rows(&[vec![3.0]]).unwrap();
        let grad = Matrix::from_rows(&[vec![3.0]]).unwrap();
        let mut moments = Moments::zeros_like(&value);
        let cfg = AdamWConfig {
            learning_rate: 0.01,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        };
        adamw_step(&mut value, &grad, &mut moments, 1, &cfg).unwrap();
        // Hand-stepped: m = 0.1 * 3, v = 0.001 * 9; bias corrections at
        // step 1 give m_hat = 3, v_hat = 9; decay first, then the update.
        let expected = 3.0 * (1.0 - 0.01 * 0.1) - 0.01 * 3.0 / (3.0 + 1e-8);
        assert!((value.get(0, 0) - expected).abs() < 1e-12);
        assert!((moments.m.get(0, 0) - 0.3).abs() < 1e-15);
        assert!((moments.v.get(0, 0) - 0.009).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut value = Matrix::zeros(1, 1);
        let grad = Matrix::from_rows(&[vec![f64::NAN]]).unwrap();
        let mut moments = Moments::zeros_like(&value);
        let result = adamw_step(&mut value, &grad, &mut moments, 1, &AdamWConfig::default());
        assert!(result.is_err());
    }
}
