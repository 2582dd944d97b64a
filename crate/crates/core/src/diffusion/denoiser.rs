use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{invalid, Error, Result};
use crate::nn::{uniform_init, Linear, Module};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub hidden: usize,
    pub time_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            time_dim: 32,
        }
    }
}

/// Sinusoidal embedding of step `t`: `sin(t·ω_i)` in the first half,
/// `cos(t·ω_i)` in the second, `ω_i = 10000^(−i/half)`.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let w = 10000f64.powf(-(i as f64) / half as f64);
        out[i] = (t as f64 * w).sin();
        out[half + i] = (t as f64 * w).cos();
    }
    out
}

/// Noise predictor `ε_θ(x_t, c, t)`: a two-hidden-layer GELU network over the
/// concatenation `[x_t, embed(t), c]`.
///
/// The first layer is stored as three blocks (`w_x`, `w_t`, `w_c`) so that the
/// image/time part and the condition part can be computed separately and
/// combined per (image, condition) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub w_x: Tensor,
    pub w_t: Tensor,
    pub w_c: Tensor,
    pub b1: Tensor,
    pub l2: Linear,
    pub l3: Linear,
    pub steps: usize,
}

impl Denoiser {
    pub fn new<R: Rng>(image_len: usize, cond_dim: usize, steps: usize, cfg: &DenoiserConfig, rng: &mut R) -> Self {
        let h = cfg.hidden;
        let fan_in = image_len + cfg.time_dim + cond_dim;
        Self {
            w_x: uniform_init(&[image_len, h], fan_in, rng),
            w_t: uniform_init(&[cfg.time_dim, h], fan_in, rng),
            w_c: uniform_init(&[cond_dim, h], fan_in, rng),
            b1: uniform_init(&[h], fan_in, rng),
            l2: Linear::new(h, h, rng),
            l3: Linear::new(h, image_len, rng),
            steps,
        }
    }

    pub fn image_len(&self) -> usize {
        self.w_x.shape()[0]
    }

    pub fn time_dim(&self) -> usize {
        self.w_t.shape()[0]
    }

    pub fn cond_dim(&self) -> usize {
        self.w_c.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.b1.len()
    }

    /// `[n, d_t]` embeddings of the given steps.
    pub fn time_embeddings(&self, ts: &[usize]) -> Result<Tensor> {
        let d = self.time_dim();
        let mut data = Vec::with_capacity(ts.len() * d);
        for &t in ts {
            if t == 0 || t > self.steps {
                return Err(invalid(format!("timestep {t} outside 1..={}", self.steps)));
            }
            data.extend(time_embedding(t, d));
        }
        Tensor::new(vec![ts.len(), d], data)
    }

    /// Image/time half of the first layer: `x_t·W_x + e_t·W_t + b1`.
    pub fn image_hidden(&self, g: &mut Graph, ids: &[NodeId], x_t: NodeId, temb: NodeId) -> Result<NodeId> {
        let a = g.matmul(x_t, ids[0])?;
        let b = g.matmul(temb, ids[1])?;
        let s = g.add(a, b)?;
        g.add_row(s, ids[3])
    }

    /// Condition half of the first layer: `c·W_c`.
    pub fn cond_hidden(&self, g: &mut Graph, ids: &[NodeId], c: NodeId) -> Result<NodeId> {
        g.matmul(c, ids[2])
    }

    /// Remaining layers applied to first-layer pre-activations `[r, H]`.
    pub fn head(&self, g: &mut Graph, ids: &[NodeId], pre: NodeId) -> Result<NodeId> {
        let h1 = g.gelu(pre)?;
        let h2 = Linear::forward(g, ids[4], ids[5], h1)?;
        let h2 = g.gelu(h2)?;
        Linear::forward(g, ids[6], ids[7], h2)
    }

    /// Row `i` of the output is `ε_θ(x_t[i], c[i], t[i])`.
    pub fn forward(&self, g: &mut Graph, ids: &[NodeId], x_t: NodeId, temb: NodeId, c: NodeId) -> Result<NodeId> {
        let hx = self.image_hidden(g, ids, x_t, temb)?;
        let hc = self.cond_hidden(g, ids, c)?;
        let pre = g.add(hx, hc)?;
        self.head(g, ids, pre)
    }

    /// Row `k` of the output pairs image row `pairs[k].0` with condition row `pairs[k].1`.
    pub fn forward_pairs(
        &self,
        g: &mut Graph,
        ids: &[NodeId],
        x_t: NodeId,
        temb: NodeId,
        c: NodeId,
        pairs: &[(usize, usize)],
    ) -> Result<NodeId> {
        let hx = self.image_hidden(g, ids, x_t, temb)?;
        let hc = self.cond_hidden(g, ids, c)?;
        let xi: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let ci: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let hx = g.gather_rows(hx, &xi)?;
        let hc = g.gather_rows(hc, &ci)?;
        let pre = g.add(hx, hc)?;
        self.head(g, ids, pre)
    }

    /// `x_t: [n, D]`, `c: [n, d_c]`, one step per row → `ε̂: [n, D]`.
    pub fn predict_noise(&self, x_t: &Tensor, c: &Tensor, ts: &[usize]) -> Result<Tensor> {
        let n = x_t.rows();
        if x_t.rank() != 2 || x_t.shape()[1] != self.image_len() || c.rank() != 2 || c.shape()[1] != self.cond_dim() || c.rows() != n || ts.len() != n {
            return Err(Error::Shape {
                op: "predict_noise",
                shapes: vec![x_t.shape().to_vec(), c.shape().to_vec(), vec![ts.len()]],
            });
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let x = g.constant(x_t.clone());
        let e = g.constant(self.time_embeddings(ts)?);
        let ci = g.constant(c.clone());
        let out = self.forward(&mut g, &b.ids, x, e, ci)?;
        Ok(g.value(out).clone())
    }
}

impl Module for Denoiser {
    fn params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("denoiser.w_x".into(), &self.w_x),
            ("denoiser.w_t".into(), &self.w_t),
            ("denoiser.w_c".into(), &self.w_c),
            ("denoiser.b1".into(), &self.b1),
            ("denoiser.w2".into(), &self.l2.weight),
            ("denoiser.b2".into(), &self.l2.bias),
            ("denoiser.w3".into(), &self.l3.weight),
            ("denoiser.b3".into(), &self.l3.bias),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w_x,
            &mut self.w_t,
            &mut self.w_c,
            &mut self.b1,
            &mut self.l2.weight,
            &mut self.l2.bias,
            &mut self.l3.weight,
            &mut self.l3.bias,
        ]
    }
}
