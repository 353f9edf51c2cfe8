use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Array, Graph, ParamId, ParamStore, Var};
use crate::error::{invalid, Result};
use crate::rng::Rng;

pub const LEAKY_SLOPE: f64 = 0.2;

/// Weight initialization scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Init {
    /// Uniform with bound `sqrt(6 / fan_in)`, for ReLU-family layers.
    He,
    /// Uniform with bound `sqrt(6 / (fan_in + fan_out))`, for sigmoid outputs.
    Xavier,
    Zeros,
}

fn init_array(shape: &[usize], fan_in: usize, fan_out: usize, init: Init, rng: &mut Rng) -> Array {
    let bound = match init {
        Init::He => (6.0 / fan_in.max(1) as f64).sqrt(),
        Init::Xavier => (6.0 / (fan_in + fan_out).max(1) as f64).sqrt(),
        Init::Zeros => 0.0,
    };
    let mut a = Array::zeros(shape);
    if bound > 0.0 {
        for v in a.data_mut() {
            *v = rng.random_range(-bound..bound);
        }
    }
    a
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        units: usize,
    },
    Conv1d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    /// Nearest-neighbour ×2 upsample followed by a stride-1 convolution.
    UpsampleConv1d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    Maxpool1d,
    Groupnorm {
        channels: usize,
        groups: usize,
    },
    Dropout {
        p: f64,
    },
    Relu,
    LeakyRelu,
    Sigmoid,
    Embedding {
        vocab: usize,
        dim: usize,
    },
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Dense { inputs, units } if inputs == 0 || units == 0 => {
                Err(invalid!("dense layer needs positive sizes"))
            }
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                kernel,
                stride,
            } if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 => {
                Err(invalid!("conv1d layer needs positive sizes"))
            }
            LayerSpec::UpsampleConv1d {
                in_channels,
                out_channels,
                kernel,
            } if in_channels == 0 || out_channels == 0 || kernel == 0 => {
                Err(invalid!("upsample-conv1d layer needs positive sizes"))
            }
            LayerSpec::Groupnorm { channels, groups } if groups == 0 || channels % groups != 0 => {
                Err(invalid!("groupnorm: {channels} channels not divisible by {groups} groups"))
            }
            LayerSpec::Dropout { p } if !(0.0..1.0).contains(&p) => {
                Err(invalid!("dropout probability must be in [0, 1), got {p}"))
            }
            LayerSpec::Embedding { vocab, dim } if vocab == 0 || dim == 0 => {
                Err(invalid!("embedding needs positive sizes"))
            }
            _ => Ok(()),
        }
    }
}

/// A layer with its parameters registered in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Layer {
    pub spec: LayerSpec,
    params: Vec<ParamId>,
}

impl Layer {
    pub fn new(spec: LayerSpec, name: &str, init: Init, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let params = match spec {
            LayerSpec::Dense { inputs, units } => vec![
                store.add(format!("{name}.w"), init_array(&[inputs, units], inputs, units, init, rng)),
                store.add(format!("{name}.b"), Array::zeros(&[units])),
            ],
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                kernel,
                ..
            }
            | LayerSpec::UpsampleConv1d {
                in_channels,
                out_channels,
                kernel,
            } => vec![
                store.add(
                    format!("{name}.w"),
                    init_array(
                        &[out_channels, in_channels, kernel],
                        in_channels * kernel,
                        out_channels * kernel,
                        init,
                        rng,
                    ),
                ),
                store.add(format!("{name}.b"), Array::zeros(&[out_channels])),
            ],
            LayerSpec::Groupnorm { channels, .. } => vec![
                store.add(format!("{name}.gamma"), Array::full(&[channels], 1.0)),
                store.add(format!("{name}.beta"), Array::zeros(&[channels])),
            ],
            LayerSpec::Embedding { vocab, dim } => vec![store.add(
                format!("{name}.table"),
                init_array(&[vocab, dim], vocab, dim, Init::Xavier, rng),
            )],
            LayerSpec::Maxpool1d
            | LayerSpec::Dropout { .. }
            | LayerSpec::Relu
            | LayerSpec::LeakyRelu
            | LayerSpec::Sigmoid => vec![],
        };
        Ok(Layer { spec, params })
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    /// Applies the layer. Train/eval behaviour follows the graph's mode.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        match self.spec {
            LayerSpec::Dense { .. } => {
                let w = g.param(self.params[0]);
                let b = g.param(self.params[1]);
                g.linear(x, w, b)
            }
            LayerSpec::Conv1d { stride, .. } => {
                let w = g.param(self.params[0]);
                let b = g.param(self.params[1]);
                g.conv1d(x, w, b, stride)
            }
            LayerSpec::UpsampleConv1d { .. } => {
                let up = g.upsample2(x);
                let w = g.param(self.params[0]);
                let b = g.param(self.params[1]);
                g.conv1d(up, w, b, 1)
            }
            LayerSpec::Maxpool1d => g.maxpool2(x),
            LayerSpec::Groupnorm { groups, .. } => {
                let gamma = g.param(self.params[0]);
                let beta = g.param(self.params[1]);
                g.group_norm(x, gamma, beta, groups)
            }
            LayerSpec::Dropout { p } => g.dropout(x, p),
            LayerSpec::Relu => Ok(g.relu(x)),
            LayerSpec::LeakyRelu => Ok(g.leaky_relu(x, LEAKY_SLOPE)),
            LayerSpec::Sigmoid => Ok(g.sigmoid(x)),
            LayerSpec::Embedding { .. } => Err(invalid!(
                "embedding layers take indices; use Layer::lookup"
            )),
        }
    }

    /// Embedding lookup for class indices.
    pub fn lookup(&self, g: &mut Graph, indices: &[usize]) -> Result<Var> {
        match self.spec {
            LayerSpec::Embedding { .. } => {
                let table = g.param(self.params[0]);
                g.embedding(table, indices)
            }
            _ => Err(invalid!("lookup on a non-embedding layer")),
        }
    }

    /// Sets every parameter of this layer to zero.
    pub fn zero_params(&self, store: &mut ParamStore) {
        for id in &self.params {
            store.get_mut(*id).data_mut().fill(0.0);
        }
    }
}

/// Applies layers in order.
pub fn forward_seq(layers: &[Layer], g: &mut Graph, mut x: Var) -> Result<Var> {
    for l in layers {
        x = l.forward(g, x)?;
    }
    Ok(x)
}

/// One-hot rows `[labels.len(), classes]`.
pub fn one_hot(labels: &[usize], classes: usize) -> Array {
    let mut a = Array::zeros(&[labels.len(), classes]);
    for (r, &y) in labels.iter().enumerate() {
        a.data_mut()[r * classes + y] = 1.0;
    }
    a
}
