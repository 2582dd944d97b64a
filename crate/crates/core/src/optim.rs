//! AdamW with decoupled weight decay.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    /// Moments sized after `params`.
    pub fn new(params: &[&Tensor], weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// `θ ← θ(1 − lr·wd)`, then the bias-corrected Adam step.
    ///
    /// Every gradient is checked before anything is touched, so a non-finite
    /// gradient leaves parameters and moments unchanged.
    pub fn step(&mut self, params: &mut [&mut Tensor], names: &[String], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.len() != self.m[i].len() {
                return Err(Error::Shape {
                    op: "adamw_step",
                    shapes: vec![p.shape().to_vec(), g.shape().to_vec()],
                });
            }
            if !g.is_finite() {
                let name = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
                return Err(Error::NonFiniteGradient(name));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let decay = 1.0 - lr * self.weight_decay;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, (theta, gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                *theta = *theta * decay - lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(theta: f64, g: f64, wd: f64, lr: f64) -> f64 {
        let mut p = Tensor::vector(vec![theta]);
        let mut opt = AdamW::new(&[&p], wd);
        opt.step(&mut [&mut p], &["p".into()], &[Tensor::vector(vec![g])], lr).unwrap();
        p.data()[0]
    }

    #[test]
    fn zero_gradient_without_decay_is_fixed_point() {
        assert_eq!(one(0.7, 0.0, 0.0, 0.1), 0.7);
    }

    #[test]
    fn first_step_by_hand() {
        // m̂ = v̂ = 1 → θ' = 1 − 0.1·1/(1 + 1e-8)
        let th = one(1.0, 1.0, 0.0, 0.1);
        assert!((th - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((th - 0.9).abs() < 1e-8);
    }

    #[test]
    fn pure_decay() {
        assert!((one(2.0, 0.0, 0.01, 0.1) - 2.0 * (1.0 - 0.001)).abs() < 1e-15);
    }

    #[test]
    fn second_step_recurrence() {
        let mut p = Tensor::vector(vec![0.0]);
        let mut opt = AdamW::new(&[&p], 0.0);
        let names = ["p".to_string()];
        opt.step(&mut [&mut p], &names, &[Tensor::vector(vec![1.0])], 0.01).unwrap();
        opt.step(&mut [&mut p], &names, &[Tensor::vector(vec![-2.0])], 0.01).unwrap();
        let m = 0.9 * 0.1 + 0.1 * -2.0;
        let v = 0.999 * 0.001 + 0.001 * 4.0;
        let m_hat = m / (1.0 - 0.81);
        let v_hat = v / (1.0 - 0.999f64.powi(2));
        let want = -0.01 / (1.0 + 1e-8) - 0.01 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p.data()[0] - want).abs() < 1e-15);
        assert_eq!(opt.steps_taken(), 2);
    }

    #[test]
    fn nan_gradient_names_parameter_and_changes_nothing() {
        let mut a = Tensor::vector(vec![1.0, 2.0]);
        let mut b = Tensor::vector(vec![3.0]);
        let mut opt = AdamW::new(&[&a, &b], 0.01);
        let err = opt
            .step(
                &mut [&mut a, &mut b],
                &["enc.w".into(), "enc.b".into()],
                &[Tensor::vector(vec![0.1, 0.2]), Tensor::vector(vec![f64::NAN])],
                0.1,
            )
            .unwrap_err();
        assert!(err.to_string().contains("enc.b"), "{err}");
        assert_eq!(a.data(), &[1.0, 2.0]);
        assert_eq!(opt.steps_taken(), 0);
    }
}
