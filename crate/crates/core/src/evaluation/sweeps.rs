use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{theorem1_on_batch, variance_identity_check, verify_theorem2_sandwich, SandwichCheck, SandwichConstants, SandwichOutcome};
use crate::datasets::{batches, Dataset};
use crate::diffusion::DiffusionSchedule;
use crate::error::{invalid, Result};
use crate::losses::ContrastiveSet;
use crate::model::{step_rng, stream_rng, tags, Model};

fn normal_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Report {
    pub sets: usize,
    pub max_abs_diff: f64,
    /// `(n, dim)` of the set with the largest difference.
    pub worst: (usize, usize),
}

/// Variance identity on `sets` Gaussian point sets; the first has exactly
/// `max_n` points, the rest a uniform size in `1..=max_n`.
pub fn lemma1_sweep(sets: usize, max_n: usize, dim: usize, seed: u64) -> Result<Lemma1Report> {
    if max_n == 0 || dim == 0 {
        return Err(invalid("variance identity sweep needs max_n >= 1 and dim >= 1"));
    }
    let mut rng = stream_rng(seed, tags::EVAL);
    let mut report = Lemma1Report {
        sets,
        max_abs_diff: 0.0,
        worst: (0, dim),
    };
    for s in 0..sets {
        let n = if s == 0 { max_n } else { rng.gen_range(1..=max_n) };
        let pts: Vec<Vec<f64>> = (0..n).map(|_| normal_vec(&mut rng, dim)).collect();
        let (_, _, diff) = variance_identity_check(&pts)?;
        if diff >= report.max_abs_diff {
            report.max_abs_diff = diff;
            report.worst = (n, dim);
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Batch {
    pub index: usize,
    pub t: usize,
    pub size: usize,
    pub classes: usize,
    pub m: f64,
    pub l: f64,
    pub kappa: f64,
    pub eta: f64,
    pub inner_margin: f64,
    pub inter_margin: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Sweep {
    pub batches: Vec<Theorem1Batch>,
    pub violations: usize,
}

/// Scatter-transfer check on `count` seeded batches of `data`, skipping
/// batches with a single class. Each batch shares one `(x_t, t)`: the first
/// image noised at a uniform step.
pub fn theorem1_sweep(
    model: &Model,
    data: &Dataset,
    sched: &DiffusionSchedule,
    count: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Theorem1Sweep> {
    let size = batch_size.min(data.len());
    if size < 2 || data.num_classes < 2 {
        return Err(invalid("scatter transfer sweep needs batches of at least 2 images and 2 classes"));
    }
    let mut out = Vec::with_capacity(count);
    let mut epoch = 0;
    while out.len() < count {
        if epoch > 1000 + count as u64 {
            return Err(invalid("could not draw enough batches with two classes"));
        }
        for idx in batches(data.len(), size, seed, epoch)? {
            if out.len() == count {
                break;
            }
            let batch = data.subset(&idx);
            let classes = {
                let mut l = batch.labels();
                l.sort_unstable();
                l.dedup();
                l.len()
            };
            if classes < 2 {
                continue;
            }
            let index = out.len();
            let mut rng = step_rng(seed, tags::EVAL, index as u64);
            let t = rng.gen_range(1..=sched.steps);
            let eps = normal_vec(&mut rng, data.dims.len());
            let x_t = sched.forward_noise(&batch.images[0].pixels, t, &eps)?;
            let (_, est, chk) = theorem1_on_batch(&model.encoder, &model.projector, &model.denoiser, &batch, &x_t, t)?;
            out.push(Theorem1Batch {
                index,
                t,
                size: idx.len(),
                classes,
                m: est.m,
                l: est.l,
                kappa: est.kappa,
                eta: est.eta,
                inner_margin: chk.inner_margin,
                inter_margin: chk.inter_margin,
                pass: chk.pass,
            });
        }
        epoch += 1;
    }
    let violations = out.iter().filter(|b| !b.pass).count();
    Ok(Theorem1Sweep { batches: out, violations })
}

/// A random contrastive set and constants it satisfies, or `None` when no
/// negative sits below `sim(ε̂, ε_gt)`. The constants are the tightest ones
/// for the set, then loosened at random (wider norm range, smaller
/// separation, larger negative bound).
pub fn random_sandwich_instance(rng: &mut ChaCha8Rng) -> Result<Option<(ContrastiveSet, SandwichConstants)>> {
    let d = rng.gen_range(2..=16);
    let tau = rng.gen_range(0.02..1.0);
    let k = rng.gen_range(1..=8);
    let scaled = |v: Vec<f64>, rng: &mut ChaCha8Rng| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        let r = rng.gen_range(0.5..2.0);
        v.into_iter().map(|x| x * r / n).collect::<Vec<f64>>()
    };
    let anchor = scaled(normal_vec(rng, d), rng);
    let spread = rng.gen_range(0.0..1.5);
    let near = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let noise = normal_vec(rng, d);
        anchor.iter().zip(noise).map(|(a, e)| a + spread * e).collect()
    };
    let gt = near(rng);
    let gt = scaled(gt, rng);
    let plus = near(rng);
    let plus = scaled(plus, rng);
    let negatives = (0..k).map(|_| scaled(normal_vec(rng, d), rng)).collect();
    let set = ContrastiveSet {
        anchor,
        positives: [plus, gt],
        negatives,
        tau,
    };
    let Some(tight) = SandwichConstants::for_set(&set)? else {
        return Ok(None);
    };
    let consts = SandwichConstants::new(
        tight.alpha * rng.gen_range(0.5..=1.0),
        tight.beta * rng.gen_range(1.0..=2.0),
        tight.separation * rng.gen_range(0.05..=1.0),
        tight.max_negatives + rng.gen_range(0..=3),
        tau,
    )?;
    Ok(Some((set, consts)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SandwichSweep {
    pub checked: usize,
    /// Draws discarded because no admissible constants exist for them.
    pub rejected: usize,
    pub violations: Vec<(usize, SandwichCheck)>,
    /// Smallest `L − lower` and `upper − L` seen.
    pub min_lower_margin: f64,
    pub min_upper_margin: f64,
}

/// Checks the sandwich on `instances` admissible random sets.
pub fn sandwich_sweep(instances: usize, seed: u64) -> Result<SandwichSweep> {
    let mut rng = stream_rng(seed, tags::EVAL);
    let mut sweep = SandwichSweep {
        checked: 0,
        rejected: 0,
        violations: Vec::new(),
        min_lower_margin: f64::INFINITY,
        min_upper_margin: f64::INFINITY,
    };
    while sweep.checked < instances {
        if sweep.rejected > 100 * instances.max(1) {
            return Err(invalid("too few admissible sandwich instances"));
        }
        let Some((set, consts)) = random_sandwich_instance(&mut rng)? else {
            sweep.rejected += 1;
            continue;
        };
        match verify_theorem2_sandwich(&set, &consts)? {
            SandwichOutcome::Checked(c) => {
                sweep.min_lower_margin = sweep.min_lower_margin.min(c.loss - c.lower);
                sweep.min_upper_margin = sweep.min_upper_margin.min(c.upper - c.loss);
                if !c.pass {
                    sweep.violations.push((sweep.checked, c));
                }
                sweep.checked += 1;
            }
            SandwichOutcome::Rejected(_) => sweep.rejected += 1,
        }
    }
    Ok(sweep)
}
