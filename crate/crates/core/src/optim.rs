//! AdamW with decoupled weight decay, plus the polynomial LR schedule.

use crate::error::{Error, Result};
use crate::nn::Parameter;
use crate::tensor::Scalar;

pub const ADAMW_BETA1: f64 = 0.9;
pub const ADAMW_BETA2: f64 = 0.999;
pub const ADAMW_EPS: f64 = 1e-8;

pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: ADAMW_BETA1,
            beta2: ADAMW_BETA2,
            eps: ADAMW_EPS,
            weight_decay,
        }
    }

    /// One update over `params`. Every parameter must carry a gradient;
    /// gradients are consumed by the step. Bias correction uses each
    /// parameter's own step count.
    ///
    /// theta <- theta * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps)
    pub fn step<T: Scalar>(&mut self, params: &mut [&mut Parameter<T>], lr: f64) -> Result<()> {
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one_m_b1 = T::from_f64(1.0 - self.beta1);
        let one_m_b2 = T::from_f64(1.0 - self.beta2);
        let eps = T::from_f64(self.eps);
        let lr_t = T::from_f64(lr);
        let decay = T::from_f64(1.0 - lr * self.weight_decay);

        for p in params.iter_mut() {
            let grad = p
                .grad
                .take()
                .ok_or_else(|| Error::MissingGrad(p.name.clone()))?;
            p.adam_steps += 1;
            let inv_bc1 = T::from_f64(1.0 / (1.0 - self.beta1.powi(p.adam_steps as i32)));
            let inv_bc2 = T::from_f64(1.0 / (1.0 - self.beta2.powi(p.adam_steps as i32)));
            let g = grad.data();
            let m = p.moment1.data_mut();
            for (mi, &gi) in m.iter_mut().zip(g) {
                *mi = b1 * *mi + one_m_b1 * gi;
            }
            let v = p.moment2.data_mut();
            for (vi, &gi) in v.iter_mut().zip(g) {
                *vi = b2 * *vi + one_m_b2 * gi * gi;
            }
            let m = p.moment1.data();
            let v = p.moment2.data();
            let theta = p.value.data_mut();
            for ((t, &mi), &vi) in theta.iter_mut().zip(m).zip(v) {
                let m_hat = mi * inv_bc1;
                let v_hat = vi * inv_bc2;
                *t = *t * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// lr0 * (1 - t/T)^power; the decay reaches zero at t = T.
pub fn poly_lr(t: usize, total: usize, lr0: f64, power: f64) -> f64 {
    debug_assert!(t <= total);
    lr0 * (1.0 - t as f64 / total as f64).powf(power)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_grad_zero_decay_leaves_parameter_unchanged() {
        let mut p = Parameter::new("p", Tensor::<f32>::from_vec(vec![2], vec![1.5, -2.0]).unwrap());
        p.grad = Some(Tensor::zeros(vec![2]));
        let mut opt = AdamW::new(0.0);
        opt.step(&mut [&mut p], 1e-3).unwrap();
        assert_eq!(p.value.data(), &[1.5, -2.0]);
        assert!(p.grad.is_none(), "gradient consumed by the step");
    }

    #[test]
    fn single_step_matches_hand_evaluated_update() {
        let theta0 = 0.8f64;
        let g = -0.3f64;
        let lr = 1e-2;
        let wd = 0.05;
        let mut p = Parameter::new("p", Tensor::<f64>::scalar(theta0));
        p.grad = Some(Tensor::scalar(g));
        let mut opt = AdamW::new(wd);
        opt.step(&mut [&mut p], lr).unwrap();

        // After one step the bias corrections cancel the (1 - beta) factors.
        let m_hat = g;
        let v_hat = g * g;
        let expected = theta0 * (1.0 - lr * wd) - lr * m_hat / (v_hat.sqrt() + ADAMW_EPS);
        assert!((p.value.item() - expected).abs() < 1e-15);
    }

    #[test]
    fn decay_with_zero_grad_is_pure_shrink() {
        let mut p = Parameter::new("p", Tensor::<f64>::scalar(2.0));
        p.grad = Some(Tensor::zeros(vec![1]));
        let mut opt = AdamW::new(0.1);
        let lr = 0.5;
        opt.step(&mut [&mut p], lr).unwrap();
        assert!((p.value.item() - 2.0 * (1.0 - lr * 0.1)).abs() < 1e-15);
    }

    #[test]
    fn missing_grad_is_an_error_naming_the_parameter() {
        let mut p = Parameter::new("encoder.w", Tensor::<f32>::scalar(1.0));
        let mut opt = AdamW::new(0.0);
        let err = opt.step(&mut [&mut p], 1e-3).unwrap_err();
        assert!(err.to_string().contains("encoder.w"));
    }

    #[test]
    fn poly_schedule_endpoints_and_midpoint() {
        assert_eq!(poly_lr(0, 100, 5e-4, 0.9), 5e-4);
        assert_eq!(poly_lr(100, 100, 5e-4, 0.9), 0.0);
        assert!((poly_lr(50, 100, 1.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
