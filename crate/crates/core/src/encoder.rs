//! Vision encoder `x ↦ z` and projector `z ↦ c`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::nn::{Activation, Linear, Mlp, Module};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub hidden_layers: usize,
    pub d_z: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            hidden_layers: 2,
            d_z: 32,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectorConfig {
    pub d_c: usize,
    pub activation: Activation,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        Self {
            d_c: 32,
            activation: Activation::Gelu,
        }
    }
}

fn check_width(op: &'static str, x: &Tensor, width: usize) -> Result<()> {
    if x.rank() != 2 || x.shape()[1] != width {
        return Err(Error::Shape {
            op,
            shapes: vec![x.shape().to_vec(), vec![0, width]],
        });
    }
    Ok(())
}

/// Flattened image → GELU MLP → feature `z`.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub mlp: Mlp,
}

impl Encoder {
    pub fn new<R: Rng>(input_len: usize, cfg: &EncoderConfig, rng: &mut R) -> Self {
        let mut widths = vec![input_len];
        widths.extend(std::iter::repeat_n(cfg.hidden, cfg.hidden_layers));
        widths.push(cfg.d_z);
        Self {
            mlp: Mlp::new("encoder", &widths, Activation::Gelu, rng),
        }
    }

    pub fn input_len(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn d_z(&self) -> usize {
        self.mlp.output_dim()
    }

    /// `x: [n, D]` node → `z: [n, d_z]` node.
    pub fn forward(&self, g: &mut Graph, ids: &[NodeId], x: NodeId) -> Result<NodeId> {
        self.mlp.forward(g, ids, x)
    }

    /// Encodes `[n, D]` rows outside of any training graph.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        check_width("encode", x, self.input_len())?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let xi = g.constant(x.clone());
        let z = self.forward(&mut g, &b.ids, xi)?;
        Ok(g.value(z).clone())
    }
}

impl Module for Encoder {
    fn params(&self) -> Vec<(String, &Tensor)> {
        self.mlp.params()
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.mlp.params_mut()
    }
}

/// Two-layer map `z → c` (hidden width `d_c`).
#[derive(Clone, Debug, PartialEq)]
pub struct Projector {
    pub mlp: Mlp,
}

impl Projector {
    pub fn new<R: Rng>(d_z: usize, cfg: &ProjectorConfig, rng: &mut R) -> Self {
        Self {
            mlp: Mlp::new("projector", &[d_z, cfg.d_c, cfg.d_c], cfg.activation, rng),
        }
    }

    /// Square projector whose two layers are identity matrices with zero bias.
    pub fn identity(dim: usize, activation: Activation) -> Self {
        let eye = || {
            let mut l = Linear::zeros(dim, dim);
            for i in 0..dim {
                l.weight.data_mut()[i * dim + i] = 1.0;
            }
            l
        };
        Self {
            mlp: Mlp::from_layers("projector", vec![eye(), eye()], activation),
        }
    }

    pub fn d_z(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn d_c(&self) -> usize {
        self.mlp.output_dim()
    }

    pub fn forward(&self, g: &mut Graph, ids: &[NodeId], z: NodeId) -> Result<NodeId> {
        self.mlp.forward(g, ids, z)
    }

    pub fn project(&self, z: &Tensor) -> Result<Tensor> {
        check_width("project", z, self.d_z())?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let zi = g.constant(z.clone());
        let c = self.forward(&mut g, &b.ids, zi)?;
        Ok(g.value(c).clone())
    }
}

impl Module for Projector {
    fn params(&self) -> Vec<(String, &Tensor)> {
        self.mlp.params()
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.mlp.params_mut()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, max_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        crate::nn::uniform_init(shape, 1, &mut rng)
    }

    fn small() -> EncoderConfig {
        EncoderConfig {
            hidden: 6,
            hidden_layers: 2,
            d_z: 4,
        }
    }

    #[test]
    fn zero_final_layer_emits_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut enc = Encoder::new(9, &small(), &mut rng);
        let last = enc.mlp.layers.last_mut().unwrap();
        last.weight = Tensor::zeros(vec![6, 4]);
        last.bias = Tensor::vector(vec![0.1, -0.2, 0.3, 0.4]);
        let z = enc.encode(&Tensor::zeros(vec![1, 9])).unwrap();
        assert_eq!(z.data(), &[0.1, -0.2, 0.3, 0.4]);
    }

    #[test]
    fn encode_is_deterministic_and_checks_dims() {
        let enc = Encoder::new(9, &small(), &mut ChaCha8Rng::seed_from_u64(1));
        let x = rand_tensor(&[3, 9], 2);
        assert_eq!(enc.encode(&x).unwrap(), enc.encode(&x).unwrap());
        assert!(enc.encode(&rand_tensor(&[3, 8], 2)).is_err());
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let enc = Encoder::new(9, &small(), &mut ChaCha8Rng::seed_from_u64(3));
        let mut g = Graph::new();
        let b = enc.bind(&mut g, true);
        let x = g.constant(rand_tensor(&[2, 9], 4));
        let z = enc.forward(&mut g, &b.ids, x).unwrap();
        let sq = g.square(z).unwrap();
        let out = g.sum(sq).unwrap();
        let checks = grad_check(&mut g, out, 1e-6).unwrap();
        assert!(max_error(&checks) < 1e-5, "{}", max_error(&checks));
    }

    #[test]
    fn identity_projector_with_linear_activation_is_exact() {
        let p = Projector::identity(5, Activation::Linear);
        let z = rand_tensor(&[3, 5], 5);
        assert_eq!(p.project(&z).unwrap(), z);
    }

    #[test]
    fn projector_gradient_wrt_z() {
        let p = Projector::new(4, &ProjectorConfig { d_c: 3, activation: Activation::Gelu }, &mut ChaCha8Rng::seed_from_u64(6));
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let z = g.param(rand_tensor(&[2, 4], 7));
        let c = p.forward(&mut g, &b.ids, z).unwrap();
        let sq = g.square(c).unwrap();
        let out = g.sum(sq).unwrap();
        let checks = grad_check(&mut g, out, 1e-6).unwrap();
        assert_eq!(checks.len(), 1);
        assert!(max_error(&checks) < 1e-5);
    }

    #[test]
    fn batched_and_single_projection_agree() {
        let p = Projector::new(4, &ProjectorConfig::default(), &mut ChaCha8Rng::seed_from_u64(8));
        let z = rand_tensor(&[5, 4], 9);
        let all = p.project(&z).unwrap();
        for i in 0..5 {
            let one = p.project(&Tensor::from_rows(&[z.row(i).to_vec()]).unwrap()).unwrap();
            for (a, b) in one.data().iter().zip(all.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn image_to_condition_path_passes_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let enc = Encoder::new(9, &small(), &mut rng);
        let p = Projector::new(4, &ProjectorConfig { d_c: 3, activation: Activation::Gelu }, &mut rng);
        let mut g = Graph::new();
        let be = enc.bind(&mut g, true);
        let bp = p.bind(&mut g, true);
        let x = g.constant(rand_tensor(&[2, 9], 11));
        let z = enc.forward(&mut g, &be.ids, x).unwrap();
        let c = p.forward(&mut g, &bp.ids, z).unwrap();
        let sq = g.square(c).unwrap();
        let out = g.sum(sq).unwrap();
        let checks = grad_check(&mut g, out, 1e-6).unwrap();
        assert_eq!(checks.len(), enc.params().len() + p.params().len());
        assert!(max_error(&checks) < 1e-5);
    }
}
