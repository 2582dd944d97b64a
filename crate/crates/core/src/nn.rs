//! Fully connected building blocks shared by the encoder, projector and denoiser.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
    Linear,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        match self {
            Activation::Gelu => g.gelu(x),
            Activation::Relu => g.relu(x),
            Activation::Linear => Ok(x),
        }
    }
}

/// Uniform `±1/√fan_in` initialization.
pub fn uniform_init<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
        .expect("shape product matches")
}

/// Anything that owns an ordered list of named parameter tensors.
pub trait Module {
    fn params(&self) -> Vec<(String, &Tensor)>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    /// Places every parameter in `g`, trainable or constant.
    fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let ids = self
            .params()
            .into_iter()
            .map(|(_, t)| {
                let t = t.clone();
                if trainable {
                    g.param(t)
                } else {
                    g.constant(t)
                }
            })
            .collect();
        Bound { ids, trainable }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    fn param_names(&self) -> Vec<String> {
        self.params().into_iter().map(|(n, _)| n).collect()
    }

    /// Little-endian bytes of every parameter value, in order.
    fn param_bytes(&self) -> Vec<u8> {
        self.params()
            .iter()
            .flat_map(|(_, t)| t.data().iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }
}

/// Graph node ids of a module's parameters, in [`Module::params`] order.
#[derive(Clone, Debug)]
pub struct Bound {
    pub ids: Vec<NodeId>,
    pub trainable: bool,
}

impl Bound {
    /// Gradients accumulated on each parameter node.
    pub fn grads(&self, g: &Graph) -> Vec<Tensor> {
        self.ids.iter().map(|id| g.grad_tensor(*id)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `[in, out]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            weight: uniform_init(&[fan_in, fan_out], fan_in, rng),
            bias: uniform_init(&[fan_out], fan_in, rng),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![fan_in, fan_out]),
            bias: Tensor::zeros(vec![fan_out]),
        }
    }

    pub fn forward(g: &mut Graph, weight: NodeId, bias: NodeId, x: NodeId) -> Result<NodeId> {
        let xw = g.matmul(x, weight)?;
        g.add_row(xw, bias)
    }
}

/// Stack of [`Linear`] layers with an activation between consecutive layers
/// (none after the last).
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
    prefix: String,
}

impl Mlp {
    /// `widths = [in, h1, ..., out]`.
    pub fn new<R: Rng>(prefix: &str, widths: &[usize], activation: Activation, rng: &mut R) -> Self {
        let layers = widths.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect();
        Self {
            layers,
            activation,
            prefix: prefix.to_string(),
        }
    }

    pub fn from_layers(prefix: &str, layers: Vec<Linear>, activation: Activation) -> Self {
        Self {
            layers,
            activation,
            prefix: prefix.to_string(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").weight.shape()[1]
    }

    /// `ids` must be the slice this MLP contributed to a [`Bound`].
    pub fn forward(&self, g: &mut Graph, ids: &[NodeId], x: NodeId) -> Result<NodeId> {
        let mut h = x;
        let n = self.layers.len();
        for l in 0..n {
            h = Linear::forward(g, ids[2 * l], ids[2 * l + 1], h)?;
            if l + 1 < n {
                h = self.activation.apply(g, h)?;
            }
        }
        Ok(h)
    }
}

impl Module for Mlp {
    fn params(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("{}.{i}.weight", self.prefix), &l.weight),
                    (format!("{}.{i}.bias", self.prefix), &l.bias),
                ]
            })
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}
