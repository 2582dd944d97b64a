//! Training objectives: group-wise InfoNCE on features, noise reconstruction,
//! their weighted sum, and the diffusion contrastive loss on predicted noise.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{invalid, Error, Result};

pub const DEFAULT_TAU: f64 = 0.07;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_con: f64,
    pub lambda_rec: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_con: 1.0,
            lambda_rec: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v >= 0.0 && v.is_finite();
        if !ok(self.lambda_con) || !ok(self.lambda_rec) {
            return Err(invalid(format!(
                "loss weights must be finite and nonnegative, got ({}, {})",
                self.lambda_con, self.lambda_rec
            )));
        }
        if self.lambda_con == 0.0 && self.lambda_rec == 0.0 {
            return Err(invalid("lambda_con and lambda_rec are both zero"));
        }
        Ok(())
    }
}

/// How positives are chosen for the feature-space contrastive loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositiveMode {
    /// Same class label.
    Labels,
    /// The other augmented view of the same image.
    #[default]
    Augmented,
}

/// Group ids for `2n` features laid out as `[views of 0..n, second views of 0..n]`.
pub fn positive_groups(mode: PositiveMode, labels: &[usize]) -> Vec<usize> {
    let n = labels.len();
    match mode {
        PositiveMode::Labels => labels.iter().chain(labels).copied().collect(),
        PositiveMode::Augmented => (0..n).chain(0..n).collect(),
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(invalid(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// InfoNCE over rows of `features: [n, d]`:
/// mean over anchors `i` of `−log Σ_{j∈P(i)} e^{s_ij/τ} + log Σ_{k≠i} e^{s_ik/τ}`,
/// with `P(i)` the other rows sharing `groups[i]` and `s` cosine similarity.
pub fn info_nce_graph(g: &mut Graph, features: NodeId, groups: &[usize], tau: f64) -> Result<NodeId> {
    check_tau(tau)?;
    let n = groups.len();
    if g.value(features).rank() != 2 || g.value(features).rows() != n {
        return Err(Error::Shape {
            op: "info_nce",
            shapes: vec![g.value(features).shape().to_vec(), vec![n]],
        });
    }
    if n < 2 {
        return Err(invalid("info_nce needs at least two features"));
    }
    let mut left = Vec::with_capacity(n * (n - 1));
    let mut right = Vec::with_capacity(n * (n - 1));
    let mut mask = Vec::with_capacity(n * (n - 1));
    for i in 0..n {
        let mut has_pos = false;
        for j in (0..n).filter(|&j| j != i) {
            left.push(i);
            right.push(j);
            let pos = groups[i] == groups[j];
            has_pos |= pos;
            mask.push(if pos { 0.0 } else { f64::NEG_INFINITY });
        }
        if !has_pos {
            return Err(invalid(format!("anchor {i} (group {}) has no positive", groups[i])));
        }
    }
    let a = g.gather_rows(features, &left)?;
    let b = g.gather_rows(features, &right)?;
    let sims = g.cosine(a, b)?;
    let sims = g.reshape(sims, &[n, n - 1])?;
    let logits = g.scale(sims, 1.0 / tau)?;
    let mask = g.constant(Tensor::new(vec![n, n - 1], mask)?);
    let pos_logits = g.add(logits, mask)?;
    let all = g.logsumexp_axis(logits, 1)?;
    let pos = g.logsumexp_axis(pos_logits, 1)?;
    let per_anchor = g.sub(all, pos)?;
    g.mean(per_anchor)
}

pub fn info_nce(features: &[Vec<f64>], groups: &[usize], tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let f = g.constant(Tensor::from_rows(features)?);
    let l = info_nce_graph(&mut g, f, groups, tau)?;
    g.value(l).item()
}

/// Mean over elements of `(ε̂ − ε)²`.
pub fn reconstruction_loss(eps_hat: &[f64], eps_gt: &[f64]) -> Result<f64> {
    if eps_hat.len() != eps_gt.len() || eps_hat.is_empty() {
        return Err(Error::Shape {
            op: "reconstruction_loss",
            shapes: vec![vec![eps_hat.len()], vec![eps_gt.len()]],
        });
    }
    let s: f64 = eps_hat.iter().zip(eps_gt).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / eps_hat.len() as f64)
}

pub fn joint_loss(l_con: f64, l_rec: f64, w: &LossWeights) -> f64 {
    w.lambda_con * l_con + w.lambda_rec * l_rec
}

/// Diffusion contrastive loss from a similarity matrix `sims: [n, m]` whose
/// columns are `[ε̂₊, ε_gt, negatives...]` for each of `n` anchors; returns
/// the mean over anchors of `lse(s/τ) − (s₀ + s₁)/(2τ)`.
///
/// Only the first two columns are read for the positive term, so negatives
/// may hold `−∞` to mark absent candidates.
pub fn dcr_from_sims(g: &mut Graph, sims: NodeId, tau: f64) -> Result<NodeId> {
    check_tau(tau)?;
    let shape = g.value(sims).shape().to_vec();
    if shape.len() != 2 || shape[1] < 2 || shape[0] == 0 {
        return Err(Error::Shape {
            op: "dcr_loss",
            shapes: vec![shape],
        });
    }
    let (n, m) = (shape[0], shape[1]);
    let logits = g.scale(sims, 1.0 / tau)?;
    let lse = g.logsumexp_axis(logits, 1)?;
    let flat = g.reshape(logits, &[n * m])?;
    let pos_idx: Vec<usize> = (0..n).flat_map(|i| [i * m, i * m + 1]).collect();
    let pos = g.gather_rows(flat, &pos_idx)?;
    let lse_sum = g.sum(lse)?;
    let pos_sum = g.sum(pos)?;
    let half = g.scale(pos_sum, 0.5)?;
    let total = g.sub(lse_sum, half)?;
    g.scale(total, 1.0 / n as f64)
}

/// One anchor prediction with its two positives and its negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveSet {
    /// `ε̂` for the anchor image under its own condition.
    pub anchor: Vec<f64>,
    /// `[ε̂₊, ε_gt]`
    pub positives: [Vec<f64>; 2],
    pub negatives: Vec<Vec<f64>>,
    pub tau: f64,
}

impl ContrastiveSet {
    /// Members in candidate order `[ε̂₊, ε_gt, negatives...]`.
    pub fn members(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.positives.iter().chain(&self.negatives)
    }

    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)?;
        if self.negatives.is_empty() {
            return Err(invalid("contrastive set needs at least one negative"));
        }
        let d = self.anchor.len();
        for (k, v) in std::iter::once(&self.anchor).chain(self.members()).enumerate() {
            if v.len() != d {
                return Err(Error::Shape {
                    op: "dcr_loss",
                    shapes: vec![vec![d], vec![v.len()]],
                });
            }
            if v.iter().all(|x| *x == 0.0) {
                let who = if k == 0 { "anchor".to_string() } else { format!("member {}", k - 1) };
                return Err(invalid(format!("{who} has zero norm; cosine similarity undefined")));
            }
        }
        Ok(())
    }

    /// Builds the loss in `g` with the anchor and every member as trainable
    /// leaves; returns `(loss, anchor, members [m, d])`.
    pub fn graph(&self, g: &mut Graph) -> Result<(NodeId, NodeId, NodeId)> {
        self.validate()?;
        let d = self.anchor.len();
        let m = 2 + self.negatives.len();
        let anchor = g.param(Tensor::new(vec![1, d], self.anchor.clone())?);
        let rows: Vec<Vec<f64>> = self.members().cloned().collect();
        let members = g.param(Tensor::from_rows(&rows)?);
        let rep = g.gather_rows(anchor, &vec![0; m])?;
        let sims = g.cosine(rep, members)?;
        let sims = g.reshape(sims, &[1, m])?;
        let loss = dcr_from_sims(g, sims, self.tau)?;
        Ok((loss, anchor, members))
    }

    /// Cosine similarity of the anchor with each member.
    pub fn similarities(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let na = norm(&self.anchor);
        Ok(self
            .members()
            .map(|v| dot(&self.anchor, v) / (na * norm(v)).max(crate::autodiff::COSINE_EPS))
            .collect())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn dcr_loss(set: &ContrastiveSet) -> Result<f64> {
    let mut g = Graph::new();
    let (loss, _, _) = set.graph(&mut g)?;
    g.value(loss).item()
}

/// Closed-form `∂L/∂sim(ε̂, q)` for each member `q` in candidate order:
/// `−(1 − 2p_q)/(2τ)` for the two positives and `p_q/τ` for negatives, where
/// `p_q` is the softmax of `sim/τ` over all members.
pub fn dcr_sim_gradient(set: &ContrastiveSet) -> Result<Vec<f64>> {
    let sims = set.similarities()?;
    Ok(sim_gradient_from_sims(&sims, set.tau))
}

/// Closed form of [`dcr_sim_gradient`] for given similarities.
pub fn sim_gradient_from_sims(sims: &[f64], tau: f64) -> Vec<f64> {
    let mx = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = sims.iter().map(|s| ((s - mx) / tau).exp()).collect();
    let z: f64 = w.iter().sum();
    w.iter()
        .enumerate()
        .map(|(k, wk)| {
            let p = wk / z;
            if k < 2 {
                -(1.0 - 2.0 * p) / (2.0 * tau)
            } else {
                p / tau
            }
        })
        .collect()
}
