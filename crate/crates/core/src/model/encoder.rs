use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, PoolKind, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    None,
    Max2x2,
    Avg2x2,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub activation: Activation,
    pub pool: Pooling,
}

impl ConvLayer {
    /// 3×3, stride 1, same padding, relu, 2×2 max pooling.
    pub fn block(out_channels: usize) -> Self {
        ConvLayer {
            out_channels,
            kernel: 3,
            stride: 1,
            pad: 1,
            activation: Activation::Relu,
            pool: Pooling::Max2x2,
        }
    }
}

/// Layer stack of an [`Encoder`]. The output of layer `attention_layer` (after
/// activation and pooling) is the feature map `A` used for attention; the
/// embedding is a linear map of the globally averaged last layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// `[channels, height, width]`
    pub input_shape: [usize; 3],
    pub layers: Vec<ConvLayer>,
    pub attention_layer: usize,
    pub embedding_dim: usize,
    /// Pass the embedding through a sigmoid so every component lies in (0, 1).
    pub bounded_embedding: bool,
}

impl EncoderConfig {
    /// Three conv blocks (8, 16, 32 channels) with the attention map taken after
    /// the third, and a 32-dimensional bounded embedding.
    pub fn desk(input_shape: [usize; 3]) -> Self {
        EncoderConfig {
            input_shape,
            layers: vec![ConvLayer::block(8), ConvLayer::block(16), ConvLayer::block(32)],
            attention_layer: 2,
            embedding_dim: 32,
            bounded_embedding: true,
        }
    }

    /// Output shape `[c, h, w]` of every layer, validating the arithmetic.
    pub fn layer_shapes(&self) -> Result<Vec<[usize; 3]>> {
        let [c0, h0, w0] = self.input_shape;
        if c0 == 0 || h0 == 0 || w0 == 0 {
            return Err(Error::invalid("encoder", "input shape has a zero dimension"));
        }
        if self.layers.is_empty() {
            return Err(Error::invalid("encoder", "at least one conv layer is required"));
        }
        if self.embedding_dim == 0 {
            return Err(Error::invalid("encoder", "embedding_dim must be positive"));
        }
        let mut shapes = Vec::with_capacity(self.layers.len());
        let (mut h, mut w) = (h0, w0);
        for (i, l) in self.layers.iter().enumerate() {
            if l.stride == 0 || l.kernel == 0 || l.out_channels == 0 {
                return Err(Error::invalid("encoder", format!("layer {i}: zero kernel, stride or channels")));
            }
            if l.kernel > h + 2 * l.pad || l.kernel > w + 2 * l.pad {
                return Err(Error::invalid("encoder", format!("layer {i}: kernel larger than padded input")));
            }
            h = (h + 2 * l.pad - l.kernel) / l.stride + 1;
            w = (w + 2 * l.pad - l.kernel) / l.stride + 1;
            if l.pool != Pooling::None {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::invalid("encoder", format!("layer {i}: cannot 2×2-pool {h}×{w}")));
                }
                h /= 2;
                w /= 2;
            }
            shapes.push([l.out_channels, h, w]);
        }
        let Some(a) = shapes.get(self.attention_layer) else {
            return Err(Error::invalid(
                "encoder",
                format!("attention_layer {} out of range", self.attention_layer),
            ));
        };
        if a[1] < 4 || a[2] < 4 {
            return Err(Error::invalid(
                "encoder",
                format!("attention map {}×{} is smaller than 4×4", a[1], a[2]),
            ));
        }
        Ok(shapes)
    }

    /// `(name, shape)` of every parameter, in checkpoint order.
    pub fn parameter_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let shapes = self.layer_shapes()?;
        let mut out = Vec::new();
        let mut c_in = self.input_shape[0];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("conv{i}.weight"), vec![l.out_channels, c_in, l.kernel, l.kernel]));
            out.push((format!("conv{i}.bias"), vec![l.out_channels]));
            c_in = l.out_channels;
        }
        let last = shapes.last().map(|s| s[0]).unwrap_or(c_in);
        out.push(("embed.weight".into(), vec![self.embedding_dim, last]));
        out.push(("embed.bias".into(), vec![self.embedding_dim]));
        Ok(out)
    }

    /// Spatial size `(m, n)` of the attention feature map.
    pub fn attention_dims(&self) -> Result<(usize, usize)> {
        let s = self.layer_shapes()?[self.attention_layer];
        Ok((s[1], s[2]))
    }
}

/// Convolutional encoder with one shared set of named parameters.
#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    params: Vec<(String, Tensor)>,
}

/// Output of one forward pass.
#[derive(Clone, Debug)]
pub struct Encoding {
    /// `f ∈ R^d`
    pub embedding: Tensor,
    /// `A ∈ R^{c×m×n}`
    pub feature_map: Tensor,
}

impl Encoder {
    /// He-uniform conv weights, Glorot-uniform embedding weights, zero biases.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        let shapes = config.parameter_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = shapes
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = if name.ends_with(".bias") {
                    vec![0.0; n]
                } else {
                    let bound = if shape.len() == 4 {
                        (6.0 / (shape[1] * shape[2] * shape[3]) as f64).sqrt()
                    } else {
                        (6.0 / (shape[0] + shape[1]) as f64).sqrt()
                    };
                    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
                };
                (name, Tensor::from_parts(shape, data))
            })
            .collect();
        Ok(Encoder { config, params })
    }

    /// Builds an encoder from explicit parameter values, checked against `config`.
    pub fn from_parameters(config: EncoderConfig, params: Vec<(String, Tensor)>) -> Result<Self> {
        let expected = config.parameter_shapes()?;
        if expected.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, got {}",
                expected.len(),
                params.len()
            )));
        }
        for ((en, es), (n, t)) in expected.iter().zip(&params) {
            if en != n || es.as_slice() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter `{n}` {:?} does not match expected `{en}` {es:?}",
                    t.shape()
                )));
            }
        }
        let params = params.into_iter().map(|(n, t)| (n, t.detach())).collect();
        Ok(Encoder { config, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    /// Replaces the value of parameter `index`; the shape must not change.
    pub fn set_parameter(&mut self, index: usize, value: Tensor) -> Result<()> {
        let slot = &mut self.params[index].1;
        if slot.shape() != value.shape() {
            return Err(Error::shape("set_parameter", slot.shape(), value.shape()));
        }
        *slot = value.detach();
        Ok(())
    }

    /// Registers every parameter as a leaf of `graph`.
    pub fn bind<'g>(&'g self, graph: &'g Graph, requires_grad: bool) -> BoundEncoder<'g> {
        let params = self.params.iter().map(|(_, t)| graph.leaf(t, requires_grad)).collect();
        BoundEncoder {
            config: &self.config,
            graph,
            params,
        }
    }

    /// Uses the parameters as plain values; nothing is recorded unless the input
    /// itself is a graph node.
    pub fn constants<'g>(&'g self, graph: &'g Graph) -> BoundEncoder<'g> {
        BoundEncoder {
            config: &self.config,
            graph,
            params: self.params.iter().map(|(_, t)| t.clone()).collect(),
        }
    }

    /// Embedding of `x` with no graph involvement.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        Ok(self.constants(&g).encode(x)?.embedding)
    }
}

/// An [`Encoder`] whose parameters are attached to a particular graph.
pub struct BoundEncoder<'g> {
    config: &'g EncoderConfig,
    graph: &'g Graph,
    params: Vec<Tensor>,
}

impl<'g> BoundEncoder<'g> {
    /// The parameter tensors as used in this graph, in checkpoint order.
    pub fn parameters(&self) -> &[Tensor] {
        &self.params
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn encode(&self, x: &Tensor) -> Result<Encoding> {
        let cfg = self.config;
        if x.shape() != cfg.input_shape {
            return Err(Error::shape("encode", &cfg.input_shape, x.shape()));
        }
        let g = self.graph;
        let mut h = x.clone();
        let mut feature_map = None;
        for (i, l) in cfg.layers.iter().enumerate() {
            h = g.conv2d(&h, &self.params[2 * i], &self.params[2 * i + 1], l.stride, l.pad)?;
            if l.activation == Activation::Relu {
                h = g.relu(&h)?;
            }
            h = match l.pool {
                Pooling::None => h,
                Pooling::Max2x2 => g.pool(PoolKind::Max2x2, &h)?,
                Pooling::Avg2x2 => g.pool(PoolKind::Avg2x2, &h)?,
            };
            if i == cfg.attention_layer {
                feature_map = Some(h.clone());
            }
        }
        let feature_map = feature_map.ok_or_else(|| Error::invalid("encode", "attention layer not reached"))?;
        let embedding = self.head(&h)?;
        Ok(Encoding {
            embedding,
            feature_map,
        })
    }

    fn head(&self, last: &Tensor) -> Result<Tensor> {
        let g = self.graph;
        let n = self.params.len();
        let (w, b) = (&self.params[n - 2], &self.params[n - 1]);
        let pooled = g.pool(PoolKind::GlobalAvg, last)?;
        let col = g.reshape(&pooled, &[pooled.len(), 1])?;
        let z = g.reshape(&g.matmul(w, &col)?, &[self.config.embedding_dim])?;
        let z = g.add(&z, b)?;
        if self.config.bounded_embedding {
            g.sigmoid(&z)
        } else {
            Ok(z)
        }
    }
}
