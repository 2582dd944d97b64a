use std::collections::BTreeMap;

use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_points, sq_dist};
use crate::error::{invalid, Error, Result};
use crate::model::{stream_rng, tags};

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    pub iterations: usize,
}

/// k-means++ seeding followed by Lloyd iterations until the assignment stops
/// changing or `max_iter` is reached. An emptied cluster keeps its centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> Result<KMeans> {
    check_points("kmeans", points)?;
    let n = points.len();
    if k == 0 || k > n {
        return Err(invalid(format!("k = {k} must lie in 1..={n}")));
    }
    if max_iter == 0 {
        return Err(invalid("max_iter must be at least 1"));
    }
    let mut rng = stream_rng(seed, tags::EVAL);
    let mut centroids = vec![points[rng.gen_range(0..n)].clone()];
    let mut nearest: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, d) in nearest.iter().enumerate() {
                if r < *d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            // every point coincides with a centroid already
            (0..n).find(|i| !centroids.contains(&points[*i])).unwrap_or(0)
        };
        centroids.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            nearest[i] = nearest[i].min(sq_dist(p, &points[next]));
        }
    }
    let assign = |centroids: &[Vec<f64>]| -> Vec<usize> {
        points
            .iter()
            .map(|p| {
                let mut best = (0, f64::INFINITY);
                for (c, mu) in centroids.iter().enumerate() {
                    let d = sq_dist(p, mu);
                    if d < best.1 {
                        best = (c, d);
                    }
                }
                best.0
            })
            .collect()
    };
    let mut assignments = assign(&centroids);
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            sums[a].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let next = assign(&centroids);
        if next == assignments {
            break;
        }
        assignments = next;
    }
    let inertia = points.iter().zip(&assignments).map(|(p, &a)| sq_dist(p, &centroids[a])).sum();
    Ok(KMeans {
        assignments,
        centroids,
        inertia,
        iterations,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusteringScores {
    pub nmi: f64,
    pub acc: f64,
    pub ari: f64,
}

fn relabel(xs: &[usize]) -> (Vec<usize>, usize) {
    let mut ids = BTreeMap::new();
    let out = xs
        .iter()
        .map(|x| {
            let next = ids.len();
            *ids.entry(*x).or_insert(next)
        })
        .collect();
    (out, ids.len())
}

fn entropy(counts: &[usize], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

fn choose2(x: usize) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

/// NMI (mutual information over the arithmetic mean of the two entropies),
/// ACC under the best one-to-one cluster-to-class mapping, and ARI.
///
/// When both partitions are a single block NMI is 1; ARI is 1 whenever its
/// chance-corrected denominator vanishes (both partitions trivial in the
/// same way).
pub fn clustering_metrics(pred: &[usize], truth: &[usize]) -> Result<ClusteringScores> {
    if pred.len() != truth.len() {
        return Err(Error::Shape {
            op: "clustering_metrics",
            shapes: vec![vec![pred.len()], vec![truth.len()]],
        });
    }
    if pred.is_empty() {
        return Err(invalid("clustering metrics need at least one point"));
    }
    let n = pred.len();
    let nf = n as f64;
    let (p, kp) = relabel(pred);
    let (t, kt) = relabel(truth);
    let mut table = vec![vec![0usize; kt]; kp];
    for (&a, &b) in p.iter().zip(&t) {
        table[a][b] += 1;
    }
    let rows: Vec<usize> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<usize> = (0..kt).map(|j| table.iter().map(|r| r[j]).sum()).collect();

    let mut mi = 0.0;
    for (i, r) in table.iter().enumerate() {
        for (j, &c) in r.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                mi += c / nf * (nf * c / (rows[i] as f64 * cols[j] as f64)).ln();
            }
        }
    }
    let (hp, ht) = (entropy(&rows, nf), entropy(&cols, nf));
    let nmi = if hp + ht == 0.0 { 1.0 } else { (mi / ((hp + ht) / 2.0)).clamp(0.0, 1.0) };

    let size = kp.max(kt);
    let mut weights = Matrix::new(size, size, 0i64);
    for (i, r) in table.iter().enumerate() {
        for (j, &c) in r.iter().enumerate() {
            weights[(i, j)] = c as i64;
        }
    }
    let (matched, _) = kuhn_munkres(&weights);
    let acc = matched as f64 / nf;

    let index: f64 = table.iter().flatten().map(|&c| choose2(c)).sum();
    let a: f64 = rows.iter().map(|&c| choose2(c)).sum();
    let b: f64 = cols.iter().map(|&c| choose2(c)).sum();
    let expected = a * b / choose2(n).max(f64::MIN_POSITIVE);
    let max = (a + b) / 2.0;
    let ari = if (max - expected).abs() < 1e-300 { 1.0 } else { (index - expected) / (max - expected) };
    Ok(ClusteringScores { nmi, acc, ari })
}
