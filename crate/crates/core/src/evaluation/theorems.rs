use serde::{Deserialize, Serialize};

use super::{features, noise_scatter, scatter, sq_dist, ScatterReport};
use crate::autodiff::Tensor;
use crate::datasets::Dataset;
use crate::diffusion::Denoiser;
use crate::encoder::{Encoder, Projector};
use crate::error::{invalid, Result};
use crate::losses::{dcr_loss, ContrastiveSet};

/// Relative tolerance used by both verifiers.
const SLACK: f64 = 1e-9;

fn holds(lhs: f64, rhs: f64) -> bool {
    lhs <= rhs + SLACK * lhs.abs().max(rhs.abs()).max(1.0)
}

/// Distance ratios of a map over every distinct pair of a point set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiLipschitzEstimate {
    pub m: f64,
    pub l: f64,
    /// `1/(2L²)`
    pub kappa: f64,
    /// `4/m²`
    pub eta: f64,
    pub points: usize,
    pub pairs: usize,
}

/// `m` and `L` as the min and max of `‖T(a) − T(b)‖ / ‖a − b‖` over all
/// pairs. `map` receives every point at once and returns their images in order.
pub fn estimate_bilipschitz<F>(map: F, points: &[Vec<f64>]) -> Result<BiLipschitzEstimate>
where
    F: FnOnce(&[Vec<f64>]) -> Result<Vec<Vec<f64>>>,
{
    if points.len() < 2 {
        return Err(invalid("bi-Lipschitz estimate needs at least 2 points"));
    }
    let images = map(points)?;
    if images.len() != points.len() {
        return Err(invalid(format!("map returned {} images for {} points", images.len(), points.len())));
    }
    let (mut m, mut l) = (f64::INFINITY, 0.0f64);
    let mut pairs = 0;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let dz = sq_dist(&points[i], &points[j]).sqrt();
            if dz <= 1e-9 {
                return Err(invalid(format!("points {i} and {j} coincide")));
            }
            let r = sq_dist(&images[i], &images[j]).sqrt() / dz;
            m = m.min(r);
            l = l.max(r);
            pairs += 1;
        }
    }
    if m <= 0.0 {
        return Err(invalid("map collapses distinct points; lower ratio is zero"));
    }
    Ok(BiLipschitzEstimate {
        m,
        l,
        kappa: 1.0 / (2.0 * l * l),
        eta: 4.0 / (m * m),
        points: points.len(),
        pairs,
    })
}

/// `features` followed by each class mean that does not coincide with a
/// feature already present (a singleton class's mean is its only member).
pub fn with_class_means(features: &[Vec<f64>], means: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut points = features.to_vec();
    for mu in means {
        if !points.iter().any(|p| sq_dist(p, mu).sqrt() <= 1e-9) {
            points.push(mu.clone());
        }
    }
    points
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Check {
    pub pass: bool,
    /// `S_inner` and its bound `S_inner^ε / m²`.
    pub inner: (f64, f64),
    /// `S_inter` and its bound `κ S_inter^ε − η S_inner^ε`.
    pub inter: (f64, f64),
    /// `bound − S_inner`, nonnegative when the first inequality holds.
    pub inner_margin: f64,
    /// `S_inter − bound`, nonnegative when the second holds.
    pub inter_margin: f64,
}

/// `S_inner ≤ S_inner^ε/m²` and `S_inter ≥ κ S_inter^ε − η S_inner^ε`.
pub fn verify_theorem1(report: &ScatterReport, est: &BiLipschitzEstimate) -> Theorem1Check {
    let (f, e) = (&report.feature, &report.noise);
    let inner_bound = e.s_inner / (est.m * est.m);
    let inter_bound = est.kappa * e.s_inter - est.eta * e.s_inner;
    let ok_inner = holds(f.s_inner, inner_bound);
    let ok_inter = holds(inter_bound, f.s_inter);
    Theorem1Check {
        pass: ok_inner && ok_inter,
        inner: (f.s_inner, inner_bound),
        inter: (f.s_inter, inter_bound),
        inner_margin: inner_bound - f.s_inner,
        inter_margin: f.s_inter - inter_bound,
    }
}

/// Feature and noise scatter of a labelled batch with `T(z) = ε_θ(x_t, h(z), t)`
/// at one shared `(x_t, t)`, the map's ratios over the features together
/// with their class means, and the resulting check.
pub fn theorem1_on_batch(
    encoder: &Encoder,
    projector: &Projector,
    denoiser: &Denoiser,
    batch: &Dataset,
    x_t: &[f64],
    t: usize,
) -> Result<(ScatterReport, BiLipschitzEstimate, Theorem1Check)> {
    let d = denoiser.image_len();
    if x_t.len() != d {
        return Err(invalid(format!("x_t has {} values, denoiser expects {d}", x_t.len())));
    }
    let z = features(encoder, batch)?;
    let labels = batch.labels();
    let feature = scatter(&z, &labels)?;
    let points = with_class_means(&z, &feature.means);
    let noise_map = |pts: &[Vec<f64>]| -> Result<Vec<Vec<f64>>> {
        let n = pts.len();
        let c = projector.project(&Tensor::from_rows(pts)?)?;
        let xs = Tensor::new(vec![n, d], x_t.repeat(n))?;
        let eps = denoiser.predict_noise(&xs, &c, &vec![t; n])?;
        Ok(eps.data().chunks(d).map(<[f64]>::to_vec).collect())
    };
    let images = noise_map(&points)?;
    let noise = noise_scatter(&images[..z.len()], &labels)?;
    let est = estimate_bilipschitz(|_| Ok(images.clone()), &points)?;
    let report = ScatterReport { feature, noise, t };
    let check = verify_theorem1(&report, &est);
    Ok((report, est, check))
}

/// Constants of the affine sandwich of the contrastive-reconstruction loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SandwichConstants {
    pub alpha: f64,
    pub beta: f64,
    /// Required gap between `sim(ε̂, ε_gt)` and every anchor–negative similarity.
    pub separation: f64,
    /// Upper bound on the number of negatives.
    pub max_negatives: usize,
    pub tau: f64,
    /// `B e^{−Δ/τ}`
    pub delta: f64,
    /// `ln(1 + δ)`
    pub c_neg: f64,
    /// `1/(4τβ²)`
    pub lambda_min: f64,
    /// `1/(4τα²)`
    pub lambda_max: f64,
    /// `−2/τ − 1/(2τ)`: the log-sum-exp term is at least `−2/τ` because both
    /// squared unit distances are at most 4, and the `d_gt²` conversion costs `1/(2τ)`.
    pub c_min: f64,
    /// `ln 2 + 1/τ`: the log-sum-exp term is at most `ln 2` and `d₊²/(4τ) ≤ 1/τ`.
    pub c_max: f64,
}

impl SandwichConstants {
    pub fn new(alpha: f64, beta: f64, separation: f64, max_negatives: usize, tau: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= beta && beta.is_finite()) {
            return Err(invalid(format!("need 0 < alpha <= beta, got {alpha}, {beta}")));
        }
        if !(separation > 0.0) {
            return Err(invalid(format!("separation must be positive, got {separation}")));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(invalid(format!("tau must be positive, got {tau}")));
        }
        let delta = max_negatives as f64 * (-separation / tau).exp();
        Ok(Self {
            alpha,
            beta,
            separation,
            max_negatives,
            tau,
            delta,
            c_neg: delta.ln_1p(),
            lambda_min: 1.0 / (4.0 * tau * beta * beta),
            lambda_max: 1.0 / (4.0 * tau * alpha * alpha),
            c_min: -2.0 / tau - 1.0 / (2.0 * tau),
            c_max: std::f64::consts::LN_2 + 1.0 / tau,
        })
    }

    /// Tightest admissible constants for one set: norm range over the anchor
    /// and all members, the observed separation, and the observed negative
    /// count. `None` when no negative is strictly below `sim(ε̂, ε_gt)`.
    pub fn for_set(set: &ContrastiveSet) -> Result<Option<Self>> {
        let sims = set.similarities()?;
        let u = sims[1];
        let worst = sims[2..].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sep = u - worst;
        if !(sep > 0.0) {
            return Ok(None);
        }
        let norms: Vec<f64> = std::iter::once(&set.anchor).chain(set.members()).map(|v| norm(v)).collect();
        let alpha = norms.iter().copied().fold(f64::INFINITY, f64::min);
        let beta = norms.iter().copied().fold(0.0, f64::max);
        Self::new(alpha, beta, sep, set.negatives.len(), set.tau).map(Some)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SandwichCheck {
    pub pass: bool,
    pub loss: f64,
    /// `‖ε̂ − ε_gt‖²`
    pub recon: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SandwichOutcome {
    Checked(SandwichCheck),
    /// The instance does not meet the constants' preconditions.
    Rejected(String),
}

/// `λ_min‖ε̂−ε_gt‖² + c_min ≤ L ≤ λ_max‖ε̂−ε_gt‖² + c_max + C_neg` for an
/// instance meeting the preconditions of `consts`.
pub fn verify_theorem2_sandwich(set: &ContrastiveSet, consts: &SandwichConstants) -> Result<SandwichOutcome> {
    let sims = set.similarities()?;
    if (set.tau - consts.tau).abs() > 0.0 {
        return Ok(SandwichOutcome::Rejected(format!("set tau {} differs from {}", set.tau, consts.tau)));
    }
    if set.negatives.len() > consts.max_negatives {
        return Ok(SandwichOutcome::Rejected(format!(
            "{} negatives exceed the bound {}",
            set.negatives.len(),
            consts.max_negatives
        )));
    }
    for (k, v) in std::iter::once(&set.anchor).chain(set.members()).enumerate() {
        let r = norm(v);
        if r < consts.alpha || r > consts.beta {
            return Ok(SandwichOutcome::Rejected(format!(
                "vector {k} has norm {r} outside [{}, {}]",
                consts.alpha, consts.beta
            )));
        }
    }
    let u = sims[1];
    if let Some((j, s)) = sims[2..].iter().enumerate().find(|(_, s)| **s > u - consts.separation) {
        return Ok(SandwichOutcome::Rejected(format!(
            "negative {j} has similarity {s}, above sim(anchor, gt) − Δ = {}",
            u - consts.separation
        )));
    }
    let loss = dcr_loss(set)?;
    let recon = sq_dist(&set.anchor, &set.positives[1]);
    let lower = consts.lambda_min * recon + consts.c_min;
    let upper = consts.lambda_max * recon + consts.c_max + consts.c_neg;
    Ok(SandwichOutcome::Checked(SandwichCheck {
        pass: holds(lower, loss) && holds(loss, upper),
        loss,
        recon,
        lower,
        upper,
    }))
}
