//! Feature- and noise-space scatter, clustering scores, the reconstruction
//! probe, and empirical checks of the scatter-transfer and sandwich bounds.

mod clustering;
mod sweeps;
mod theorems;

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use clustering::{clustering_metrics, kmeans, ClusteringScores, KMeans};
pub use sweeps::{
    lemma1_sweep, random_sandwich_instance, sandwich_sweep, theorem1_sweep, Lemma1Report, SandwichSweep, Theorem1Batch, Theorem1Sweep,
};
pub use theorems::{
    estimate_bilipschitz, theorem1_on_batch, verify_theorem1, verify_theorem2_sandwich, with_class_means, BiLipschitzEstimate, SandwichCheck,
    SandwichConstants, SandwichOutcome, Theorem1Check,
};

use crate::autodiff::Tensor;
use crate::datasets::Dataset;
use crate::diffusion::{Denoiser, DiffusionSchedule};
use crate::encoder::{Encoder, Projector};
use crate::error::{invalid, Error, Result};
use crate::model::{stream_rng, tags};

/// Intra- and inter-class scatter of one point set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scatter {
    pub s_inner: f64,
    pub s_inter: f64,
    /// Sorted class ids present.
    pub classes: Vec<usize>,
    /// Class means, aligned with `classes`.
    pub means: Vec<Vec<f64>>,
}

/// Scatter of encoder features and of the predicted noises at one step `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterReport {
    pub feature: Scatter,
    pub noise: Scatter,
    pub t: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_points(op: &'static str, points: &[Vec<f64>]) -> Result<usize> {
    let d = points.first().map_or(0, Vec::len);
    for p in points {
        if p.len() != d {
            return Err(Error::Shape {
                op,
                shapes: vec![vec![d], vec![p.len()]],
            });
        }
    }
    Ok(d)
}

/// `S_inner` averages each class's mean squared deviation from its mean;
/// `S_inter` averages `‖μ_y − μ_y'‖²` over ordered pairs of distinct classes.
pub fn scatter(features: &[Vec<f64>], labels: &[usize]) -> Result<Scatter> {
    if features.len() != labels.len() {
        return Err(Error::Shape {
            op: "scatter",
            shapes: vec![vec![features.len()], vec![labels.len()]],
        });
    }
    let d = check_points("scatter", features)?;
    let mut groups: BTreeMap<usize, Vec<&Vec<f64>>> = BTreeMap::new();
    for (f, &y) in features.iter().zip(labels) {
        groups.entry(y).or_default().push(f);
    }
    if groups.len() < 2 {
        return Err(invalid(format!(
            "inter-class scatter needs at least 2 classes, got {}",
            groups.len()
        )));
    }
    let mut means = Vec::with_capacity(groups.len());
    let mut inner = 0.0;
    for members in groups.values() {
        let n = members.len() as f64;
        let mut mu = vec![0.0; d];
        for m in members {
            mu.iter_mut().zip(m.iter()).for_each(|(a, b)| *a += b);
        }
        mu.iter_mut().for_each(|v| *v /= n);
        inner += members.iter().map(|m| sq_dist(m, &mu)).sum::<f64>() / n;
        means.push(mu);
    }
    let k = means.len();
    let mut inter = 0.0;
    for i in 0..k {
        for j in (0..k).filter(|&j| j != i) {
            inter += sq_dist(&means[i], &means[j]);
        }
    }
    Ok(Scatter {
        s_inner: inner / k as f64,
        s_inter: inter / (k * (k - 1)) as f64,
        classes: groups.keys().copied().collect(),
        means,
    })
}

/// Scatter of predicted noises; the same statistics as [`scatter`].
pub fn noise_scatter(eps_hats: &[Vec<f64>], labels: &[usize]) -> Result<Scatter> {
    scatter(eps_hats, labels)
}

/// Compensated (Neumaier) sum.
fn accurate_sum<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for x in xs {
        let t = sum + x;
        comp += if sum.abs() >= x.abs() { (sum - t) + x } else { (x - t) + sum };
        sum = t;
    }
    sum + comp
}

/// `(Σᵢ‖eᵢ − ē‖², (1/2n) Σᵢ Σⱼ ‖eᵢ − eⱼ‖², |difference|)`, each side
/// computed on its own with compensated sums.
pub fn variance_identity_check(vectors: &[Vec<f64>]) -> Result<(f64, f64, f64)> {
    let d = check_points("variance_identity_check", vectors)?;
    let n = vectors.len();
    if n == 0 {
        return Err(invalid("variance identity needs at least one vector"));
    }
    let mean: Vec<f64> = (0..d).map(|k| accurate_sum(vectors.iter().map(|v| v[k])) / n as f64).collect();
    let lhs = accurate_sum(vectors.iter().map(|v| sq_dist(v, &mean)));
    let pair = accurate_sum(vectors.iter().flat_map(|a| vectors.iter().map(move |b| sq_dist(a, b))));
    let rhs = pair / (2.0 * n as f64);
    Ok((lhs, rhs, (lhs - rhs).abs()))
}

/// Seeded per-item draws for the probe: `(x_t, ε, t)` with, for each image in
/// order, `t ~ U{1..T}` then `ε ~ N(0, I)`.
pub fn probe_draws(eval: &Dataset, sched: &DiffusionSchedule, seed: u64) -> Result<(Tensor, Tensor, Vec<usize>)> {
    let d = eval.dims.len();
    let n = eval.len();
    let mut rng = stream_rng(seed, tags::EVAL);
    let (mut x_t, mut eps, mut ts) = (Vec::with_capacity(n * d), Vec::with_capacity(n * d), Vec::with_capacity(n));
    for im in &eval.images {
        let t = rng.gen_range(1..=sched.steps);
        let e: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        x_t.extend(sched.forward_noise(&im.pixels, t, &e)?);
        eps.extend(e);
        ts.push(t);
    }
    Ok((Tensor::new(vec![n, d], x_t)?, Tensor::new(vec![n, d], eps)?, ts))
}

/// Mean over the evaluation images of `‖ε_θ(x_t, h(f(x)), t) − ε‖²`.
pub fn recon_probe(
    encoder: &Encoder,
    projector: &Projector,
    denoiser: &Denoiser,
    eval: &Dataset,
    sched: &DiffusionSchedule,
    seed: u64,
) -> Result<f64> {
    if eval.is_empty() {
        return Err(invalid("recon probe needs a non-empty evaluation set"));
    }
    let (x_t, eps, ts) = probe_draws(eval, sched, seed)?;
    let idx: Vec<usize> = (0..eval.len()).collect();
    let z = encoder.encode(&eval.matrix(&idx))?;
    let c = projector.project(&z)?;
    let pred = denoiser.predict_noise(&x_t, &c, &ts)?;
    let d = eval.dims.len();
    let total: f64 = pred
        .data()
        .chunks(d)
        .zip(eps.data().chunks(d))
        .map(|(p, e)| sq_dist(p, e))
        .sum();
    Ok(total / eval.len() as f64)
}

/// Encoder features of every image, one row each.
pub fn features(encoder: &Encoder, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let z = encoder.encode(&data.matrix(&idx))?;
    Ok(z.data().chunks(encoder.d_z()).map(<[f64]>::to_vec).collect())
}

/// Metrics reported for one encoder on one evaluation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub nmi: f64,
    pub acc: f64,
    pub ari: f64,
    pub s_inner: f64,
    pub s_inter: f64,
    pub recon_mse: f64,
}

/// k-means with `k = num_classes` on encoder features, feature scatter, and
/// the reconstruction probe.
pub fn evaluate_encoder(
    encoder: &Encoder,
    projector: &Projector,
    denoiser: &Denoiser,
    eval: &Dataset,
    sched: &DiffusionSchedule,
    seed: u64,
) -> Result<EvalSummary> {
    let feats = features(encoder, eval)?;
    let labels = eval.labels();
    let km = kmeans(&feats, eval.num_classes, seed, 100)?;
    let scores = clustering_metrics(&km.assignments, &labels)?;
    let sc = scatter(&feats, &labels)?;
    Ok(EvalSummary {
        nmi: scores.nmi,
        acc: scores.acc,
        ari: scores.ari,
        s_inner: sc.s_inner,
        s_inter: sc.s_inter,
        recon_mse: recon_probe(encoder, projector, denoiser, eval, sched, seed)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::generate_synthetic;
    use crate::diffusion::{DenoiserConfig, ScheduleConfig};
    use crate::encoder::{EncoderConfig, ProjectorConfig};
    use crate::nn::Module;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn singleton_classes() {
        let s = scatter(&[vec![0.0, 0.0], vec![3.0, 4.0]], &[0, 1]).unwrap();
        assert_eq!(s.s_inner, 0.0);
        assert_eq!(s.s_inter, 25.0);
    }

    #[test]
    fn class_inner_term_by_hand() {
        let s = scatter(&[vec![0.0, 0.0], vec![2.0, 0.0], vec![10.0, 0.0]], &[0, 0, 1]).unwrap();
        assert_eq!(s.means[0], vec![1.0, 0.0]);
        // class 0 contributes 1, the singleton 0; averaged over two classes
        assert_eq!(s.s_inner, 0.5);
        assert_eq!(s.s_inter, 81.0);
    }

    #[test]
    fn single_class_rejected() {
        assert!(scatter(&[vec![0.0], vec![1.0]], &[3, 3]).is_err());
        assert!(scatter(&[vec![0.0]], &[0, 1]).is_err());
    }

    #[test]
    fn noise_scatter_matches_feature_scatter() {
        let pts = vec![vec![0.5, 1.0], vec![2.0, -1.0], vec![0.0, 3.0], vec![1.0, 1.0]];
        let labels = [0, 1, 0, 1];
        assert_eq!(noise_scatter(&pts, &labels).unwrap(), scatter(&pts, &labels).unwrap());
        let doubled: Vec<Vec<f64>> = pts.iter().map(|p| p.iter().map(|v| 2.0 * v).collect()).collect();
        let a = scatter(&pts, &labels).unwrap();
        let b = noise_scatter(&doubled, &labels).unwrap();
        assert!((b.s_inner - 4.0 * a.s_inner).abs() < 1e-12);
        assert!((b.s_inter - 4.0 * a.s_inter).abs() < 1e-12);
    }

    #[test]
    fn variance_identity_examples() {
        let (l, r, _) = variance_identity_check(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!((l, r), (2.0, 2.0));
        assert_eq!(variance_identity_check(&[vec![1.0, 7.0]]).unwrap(), (0.0, 0.0, 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<Vec<f64>> = (0..50).map(|_| (0..8).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
        assert!(variance_identity_check(&pts).unwrap().2 < 1e-9);
    }

    fn points(n: usize, d: usize) -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>)> {
        (prop::collection::vec(prop::collection::vec(-10.0..10.0f64, d), n), prop::collection::vec(0..3usize, n))
            .prop_filter("two classes", |(_, l)| l.iter().any(|&y| y != l[0]))
    }

    proptest! {
        #[test]
        fn translation_invariance((pts, labels) in points(9, 3), shift in prop::collection::vec(-50.0..50.0f64, 3)) {
            let moved: Vec<Vec<f64>> = pts.iter().map(|p| p.iter().zip(&shift).map(|(a, b)| a + b).collect()).collect();
            let a = scatter(&pts, &labels).unwrap();
            let b = scatter(&moved, &labels).unwrap();
            prop_assert!((a.s_inner - b.s_inner).abs() <= 1e-9 * (1.0 + a.s_inner));
            prop_assert!((a.s_inter - b.s_inter).abs() <= 1e-9 * (1.0 + a.s_inter));
        }

        #[test]
        fn scaling_equivariance((pts, labels) in points(8, 2), s in -4.0..4.0f64) {
            let scaled: Vec<Vec<f64>> = pts.iter().map(|p| p.iter().map(|v| s * v).collect()).collect();
            let a = scatter(&pts, &labels).unwrap();
            let b = scatter(&scaled, &labels).unwrap();
            prop_assert!((b.s_inner - s * s * a.s_inner).abs() <= 1e-9 * (1.0 + b.s_inner));
            prop_assert!((b.s_inter - s * s * a.s_inter).abs() <= 1e-9 * (1.0 + b.s_inter));
        }

        #[test]
        fn scatters_nonnegative((pts, labels) in points(7, 4)) {
            let s = scatter(&pts, &labels).unwrap();
            prop_assert!(s.s_inner >= 0.0 && s.s_inter >= 0.0);
        }
    }

    fn parts() -> (Dataset, Encoder, Projector, Denoiser, DiffusionSchedule) {
        let data = generate_synthetic(3, 4, 8, 8, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let enc_cfg = EncoderConfig { hidden: 16, hidden_layers: 1, d_z: 6 };
        let enc = Encoder::new(64, &enc_cfg, &mut rng);
        let proj = Projector::new(6, &ProjectorConfig { d_c: 5, ..Default::default() }, &mut rng);
        let sched = ScheduleConfig { steps: 10, ..Default::default() }.build().unwrap();
        let den = Denoiser::new(64, 5, 10, &DenoiserConfig { hidden: 12, time_dim: 4 }, &mut rng);
        (data, enc, proj, den, sched)
    }

    #[test]
    fn probe_is_deterministic() {
        let (data, enc, proj, den, sched) = parts();
        let a = recon_probe(&enc, &proj, &den, &data, &sched, 5).unwrap();
        assert_eq!(a, recon_probe(&enc, &proj, &den, &data, &sched, 5).unwrap());
        assert_ne!(a, recon_probe(&enc, &proj, &den, &data, &sched, 6).unwrap());
    }

    #[test]
    fn dead_network_probe_is_noise_energy() {
        let (data, enc, proj, mut den, sched) = parts();
        for p in den.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let (_, eps, _) = probe_draws(&data, &sched, 3).unwrap();
        let energy = eps.data().iter().map(|v| v * v).sum::<f64>() / data.len() as f64;
        let probe = recon_probe(&enc, &proj, &den, &data, &sched, 3).unwrap();
        assert!((probe - energy).abs() < 1e-12 * energy);
    }
}
