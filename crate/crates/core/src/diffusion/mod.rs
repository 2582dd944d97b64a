//! Conditional DDPM in pixel space: linear noise schedule, forward noising,
//! the conditional noise predictor and ancestral sampling.

mod denoiser;
mod schedule;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use denoiser::{time_embedding, Denoiser, DenoiserConfig};
pub use schedule::{build_schedule, noise_with_alpha_bar, posterior_mean, DiffusionSchedule, VarianceChoice};

use crate::autodiff::Tensor;
use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub variance: VarianceChoice,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
            variance: VarianceChoice::Beta,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        build_schedule(self.steps, self.beta_start, self.beta_end, self.variance)
    }
}

/// Runs the full reverse chain from seeded Gaussian `x_T` for every row of `c`.
pub fn sample(denoiser: &Denoiser, c: &Tensor, sched: &DiffusionSchedule, seed: u64) -> Result<Tensor> {
    if denoiser.steps != sched.steps {
        return Err(invalid(format!(
            "denoiser trained for {} steps, schedule has {}",
            denoiser.steps, sched.steps
        )));
    }
    let n = c.rows();
    let d = denoiser.image_len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = |len: usize| -> Vec<f64> { (0..len).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let mut x = Tensor::new(vec![n, d], gauss(n * d))?;
    for t in (1..=sched.steps).rev() {
        let eps = denoiser.predict_noise(&x, c, &vec![t; n])?;
        let noise = (t > 1).then(|| gauss(n * d));
        let next = sched.reverse_step(x.data(), eps.data(), t, noise.as_deref())?;
        x = Tensor::new(vec![n, d], next)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, max_error, Graph};
    use crate::nn::Module;
    use rand::Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn small(seed: u64) -> Denoiser {
        let cfg = DenoiserConfig { hidden: 8, time_dim: 4 };
        Denoiser::new(6, 3, 10, &cfg, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn embedding_values() {
        let e = time_embedding(3, 4);
        assert!((e[0] - 3f64.sin()).abs() < 1e-15);
        assert!((e[1] - 0.03f64.sin()).abs() < 1e-15);
        assert!((e[2] - 3f64.cos()).abs() < 1e-15);
        assert!((e[3] - 0.03f64.cos()).abs() < 1e-15);
    }

    #[test]
    fn dead_network_emits_output_bias() {
        let mut den = small(0);
        for p in den.params_mut() {
            p.data_mut().fill(0.0);
        }
        den.l3.bias = Tensor::vector(vec![0.1, 0.2, 0.3, -0.1, -0.2, -0.3]);
        let x = rand_tensor(&[1, 6], 1);
        let a = den.predict_noise(&x, &rand_tensor(&[1, 3], 2), &[4]).unwrap();
        let b = den.predict_noise(&x, &rand_tensor(&[1, 3], 3), &[4]).unwrap();
        assert_eq!(a.data(), den.l3.bias.data());
        assert_eq!(a, b);
    }

    #[test]
    fn deterministic_and_dimension_checked() {
        let den = small(4);
        let x = rand_tensor(&[2, 6], 5);
        let c = rand_tensor(&[2, 3], 6);
        assert_eq!(den.predict_noise(&x, &c, &[1, 10]).unwrap(), den.predict_noise(&x, &c, &[1, 10]).unwrap());
        assert!(den.predict_noise(&x, &rand_tensor(&[2, 4], 6), &[1, 2]).is_err());
        assert!(den.predict_noise(&x, &c, &[1]).is_err());
        assert!(den.predict_noise(&x, &c, &[0, 1]).is_err());
        assert!(den.predict_noise(&x, &c, &[1, 11]).is_err());
    }

    #[test]
    fn gradient_flows_into_condition() {
        let den = small(7);
        let mut g = Graph::new();
        let b = den.bind(&mut g, false);
        let x = g.constant(rand_tensor(&[3, 6], 8));
        let e = g.constant(den.time_embeddings(&[1, 5, 9]).unwrap());
        let c = g.param(rand_tensor(&[3, 3], 9));
        let out = den.forward(&mut g, &b.ids, x, e, c).unwrap();
        let sq = g.square(out).unwrap();
        let loss = g.sum(sq).unwrap();
        let checks = grad_check(&mut g, loss, 1e-6).unwrap();
        assert_eq!(checks.len(), 1);
        assert!(max_error(&checks) < 1e-5, "{}", max_error(&checks));
        assert!(checks[0].analytic.iter().any(|v| v.abs() > 1e-6));
    }

    #[test]
    fn denoiser_parameter_gradients() {
        let den = small(10);
        let mut g = Graph::new();
        let b = den.bind(&mut g, true);
        let x = g.constant(rand_tensor(&[2, 6], 11));
        let e = g.constant(den.time_embeddings(&[2, 3]).unwrap());
        let c = g.constant(rand_tensor(&[2, 3], 12));
        let out = den.forward(&mut g, &b.ids, x, e, c).unwrap();
        let tgt = g.constant(rand_tensor(&[2, 6], 13));
        let loss = g.mse(out, tgt).unwrap();
        let checks = grad_check(&mut g, loss, 1e-6).unwrap();
        assert_eq!(checks.len(), 8);
        assert!(max_error(&checks) < 1e-5);
    }

    #[test]
    fn paired_forward_matches_explicit_rows() {
        let den = small(14);
        let xs = rand_tensor(&[2, 6], 15);
        let cs = rand_tensor(&[3, 3], 16);
        let pairs = [(0, 0), (0, 2), (1, 1), (1, 0)];
        let mut g = Graph::new();
        let b = den.bind(&mut g, false);
        let x = g.constant(xs.clone());
        let e = g.constant(den.time_embeddings(&[3, 7]).unwrap());
        let c = g.constant(cs.clone());
        let out = den.forward_pairs(&mut g, &b.ids, x, e, c, &pairs).unwrap();
        for (k, &(i, j)) in pairs.iter().enumerate() {
            let xi = Tensor::from_rows(&[xs.row(i).to_vec()]).unwrap();
            let cj = Tensor::from_rows(&[cs.row(j).to_vec()]).unwrap();
            let one = den.predict_noise(&xi, &cj, &[[3, 7][i]]).unwrap();
            for (a, b) in one.data().iter().zip(g.value(out).row(k)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sampling_is_seeded_and_shaped() {
        let den = small(17);
        let sched = build_schedule(10, 1e-3, 0.05, VarianceChoice::Beta).unwrap();
        let c = rand_tensor(&[2, 3], 18);
        let a = sample(&den, &c, &sched, 5).unwrap();
        assert_eq!(a.shape(), &[2, 6]);
        assert_eq!(a, sample(&den, &c, &sched, 5).unwrap());
        assert_ne!(a, sample(&den, &c, &sched, 6).unwrap());
        let wrong = build_schedule(9, 1e-3, 0.05, VarianceChoice::Beta).unwrap();
        assert!(sample(&den, &c, &wrong, 5).is_err());
    }
}
