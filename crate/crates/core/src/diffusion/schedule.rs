use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Choice of the reverse-step variance `σ_t²`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceChoice {
    /// `σ_t² = β_t`
    #[default]
    Beta,
    /// `σ_t² = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)` with `ᾱ_0 = 1`
    Posterior,
}

/// Linear noise schedule. Vectors are indexed by `t - 1` for `t = 1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    pub steps: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub sigma_sq: Vec<f64>,
    pub variance: VarianceChoice,
}

pub fn build_schedule(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    variance: VarianceChoice,
) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(invalid("diffusion needs at least one step"));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(invalid(format!(
            "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    let sigma_sq = (0..steps)
        .map(|i| match variance {
            VarianceChoice::Beta => beta[i],
            VarianceChoice::Posterior => {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                beta[i] * (1.0 - prev) / (1.0 - alpha_bar[i])
            }
        })
        .collect();
    Ok(DiffusionSchedule {
        steps,
        beta,
        alpha,
        alpha_bar,
        sigma_sq,
        variance,
    })
}

/// `√ᾱ·x0 + √(1−ᾱ)·eps` for an explicit `ᾱ`.
pub fn noise_with_alpha_bar(alpha_bar: f64, x0: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
    if x0.len() != eps.len() {
        return Err(Error::Shape {
            op: "forward_noise",
            shapes: vec![vec![x0.len()], vec![eps.len()]],
        });
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// Reverse-process mean `(x_t − β/√(1−ᾱ)·ε̂)/√α`.
pub fn posterior_mean(x_t: &[f64], eps_hat: &[f64], alpha: f64, alpha_bar: f64, beta: f64) -> Result<Vec<f64>> {
    if x_t.len() != eps_hat.len() {
        return Err(Error::Shape {
            op: "reverse_step",
            shapes: vec![vec![x_t.len()], vec![eps_hat.len()]],
        });
    }
    let k = beta / (1.0 - alpha_bar).sqrt();
    let s = 1.0 / alpha.sqrt();
    Ok(x_t.iter().zip(eps_hat).map(|(x, e)| s * (x - k * e)).collect())
}

impl DiffusionSchedule {
    fn index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps {
            return Err(invalid(format!("timestep {t} outside 1..={}", self.steps)));
        }
        Ok(t - 1)
    }

    pub fn alpha_bar_at(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.index(t)?])
    }

    pub fn forward_noise(&self, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        noise_with_alpha_bar(self.alpha_bar_at(t)?, x0, eps)
    }

    /// One ancestral step `x_t → x_{t−1}`. `noise` must be given for `t > 1`
    /// and absent at `t = 1`.
    pub fn reverse_step(&self, x_t: &[f64], eps_hat: &[f64], t: usize, noise: Option<&[f64]>) -> Result<Vec<f64>> {
        let i = self.index(t)?;
        let mut mu = posterior_mean(x_t, eps_hat, self.alpha[i], self.alpha_bar[i], self.beta[i])?;
        match (t, noise) {
            (1, None) => Ok(mu),
            (1, Some(_)) => Err(invalid("noise must not be added at t = 1")),
            (_, None) => Err(invalid(format!("noise required at t = {t}"))),
            (_, Some(z)) => {
                if z.len() != mu.len() {
                    return Err(Error::Shape {
                        op: "reverse_step",
                        shapes: vec![vec![mu.len()], vec![z.len()]],
                    });
                }
                let sigma = self.sigma_sq[i].sqrt();
                for (m, n) in mu.iter_mut().zip(z) {
                    *m += sigma * n;
                }
                Ok(mu)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_step() {
        let s = build_schedule(1, 0.5, 0.5, VarianceChoice::Beta).unwrap();
        assert_eq!(s.alpha, vec![0.5]);
        assert_eq!(s.alpha_bar, vec![0.5]);
    }

    #[test]
    fn two_step_products() {
        let s = build_schedule(2, 0.1, 0.2, VarianceChoice::Beta).unwrap();
        assert!((s.alpha_bar[0] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar[1] - 0.9 * 0.8).abs() < 1e-15);
    }

    #[test]
    fn default_range_is_monotone_and_recursive() {
        for v in [VarianceChoice::Beta, VarianceChoice::Posterior] {
            let s = build_schedule(100, 1e-4, 0.02, v).unwrap();
            for t in 1..100 {
                assert!(s.alpha_bar[t] < s.alpha_bar[t - 1]);
                assert_eq!(s.alpha_bar[t], s.alpha_bar[t - 1] * s.alpha[t]);
            }
            assert!(s.beta.iter().all(|b| *b > 0.0 && *b < 1.0));
        }
    }

    #[test]
    fn posterior_variance_oracle() {
        let s = build_schedule(3, 0.1, 0.3, VarianceChoice::Posterior).unwrap();
        // ᾱ = 0.9, 0.72, 0.504
        assert!((s.sigma_sq[0] - 0.0).abs() < 1e-15);
        assert!((s.sigma_sq[1] - 0.2 * 0.1 / 0.28).abs() < 1e-14);
        assert!((s.sigma_sq[2] - 0.3 * 0.28 / 0.496).abs() < 1e-14);
    }

    #[test]
    fn invalid_ranges() {
        assert!(build_schedule(0, 0.1, 0.2, VarianceChoice::Beta).is_err());
        assert!(build_schedule(10, 0.2, 0.1, VarianceChoice::Beta).is_err());
        assert!(build_schedule(10, 0.0, 0.1, VarianceChoice::Beta).is_err());
        assert!(build_schedule(10, 0.1, 1.0, VarianceChoice::Beta).is_err());
    }

    #[test]
    fn forward_noise_endpoints_and_scalar() {
        assert_eq!(noise_with_alpha_bar(1.0, &[0.3, -2.0], &[5.0, 7.0]).unwrap(), vec![0.3, -2.0]);
        assert_eq!(noise_with_alpha_bar(0.0, &[0.3, -2.0], &[5.0, 7.0]).unwrap(), vec![5.0, 7.0]);
        let v = noise_with_alpha_bar(0.25, &[2.0], &[1.0]).unwrap()[0];
        assert!((v - (1.0 + 0.75f64.sqrt())).abs() < 1e-15);
        assert!((v - 1.866025).abs() < 1e-6);
        assert!(noise_with_alpha_bar(0.5, &[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn forward_noise_uses_t_and_checks_range() {
        let s = build_schedule(2, 0.1, 0.2, VarianceChoice::Beta).unwrap();
        let x = s.forward_noise(&[1.0], 2, &[0.0]).unwrap()[0];
        assert!((x - 0.72f64.sqrt()).abs() < 1e-15);
        assert!(s.forward_noise(&[1.0], 0, &[0.0]).is_err());
        assert!(s.forward_noise(&[1.0], 3, &[0.0]).is_err());
    }

    #[test]
    fn posterior_mean_cases() {
        let mu = posterior_mean(&[1.0], &[1.0], 0.99, 0.5, 0.01).unwrap()[0];
        assert!((mu - (1.0 - 0.01 / 0.5f64.sqrt()) / 0.99f64.sqrt()).abs() < 1e-15);
        assert!((mu - 0.990824).abs() < 1e-6);
        let mu0 = posterior_mean(&[2.0], &[0.0], 0.81, 0.5, 0.19).unwrap()[0];
        assert!((mu0 - 2.0 / 0.9).abs() < 1e-15);
        let lim = posterior_mean(&[0.7], &[3.0], 1.0 - 1e-12, 0.5, 1e-12).unwrap()[0];
        assert!((lim - 0.7).abs() < 1e-10);
    }

    #[test]
    fn noise_rule_enforced() {
        let s = build_schedule(3, 0.1, 0.3, VarianceChoice::Beta).unwrap();
        assert!(s.reverse_step(&[1.0], &[0.0], 1, Some(&[0.5])).is_err());
        assert!(s.reverse_step(&[1.0], &[0.0], 2, None).is_err());
        let a = s.reverse_step(&[1.0], &[0.0], 2, Some(&[0.5])).unwrap()[0];
        assert!((a - (1.0 / 0.8f64.sqrt() + 0.2f64.sqrt() * 0.5)).abs() < 1e-14);
        let b = s.reverse_step(&[1.0], &[0.0], 1, None).unwrap()[0];
        assert!((b - 1.0 / 0.9f64.sqrt()).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn forward_noise_superposition(
            ab in 0.0f64..=1.0,
            x in prop::collection::vec(-3.0f64..3.0, 6),
            y in prop::collection::vec(-3.0f64..3.0, 6),
            e in prop::collection::vec(-3.0f64..3.0, 6),
            f in prop::collection::vec(-3.0f64..3.0, 6),
        ) {
            let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
            let ef: Vec<f64> = e.iter().zip(&f).map(|(a, b)| a + b).collect();
            let lhs = noise_with_alpha_bar(ab, &xy, &ef).unwrap();
            let p = noise_with_alpha_bar(ab, &x, &e).unwrap();
            let q = noise_with_alpha_bar(ab, &y, &f).unwrap();
            for i in 0..6 {
                prop_assert!((lhs[i] - p[i] - q[i]).abs() < 1e-12);
            }
        }
    }
}
