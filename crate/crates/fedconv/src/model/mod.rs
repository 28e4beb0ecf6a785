//! Declarative model architectures, parameters, forward pass, training,
//! and evaluation.

mod checkpoint;
mod forward;
mod train;

pub use checkpoint::{read_named_tensors, write_named_tensors, MAGIC_CONV_PARAMS, MAGIC_PARAMS};
pub use forward::{forward, forward_vars, LayerVars};
pub use train::{evaluate, local_train, sgd_step, EvalReport, TrainOptions};

use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d,
    Dense,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    None,
}

/// One layer of a model: kind, channel counts, and kernel shape.
#[derive(Clone, Debug)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Kernel shape for conv layers, `None` for dense.
    pub kernel: Option<(usize, usize)>,
    pub activation: Activation,
    pub has_bias: bool,
}

impl LayerSpec {
    /// Shape of this layer's weight tensor.
    pub fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Conv2d => {
                let (k1, k2) = self.kernel.expect("conv layer has a kernel");
                vec![self.out_channels, self.in_channels, k1, k2]
            }
            LayerKind::Dense => vec![self.out_channels, self.in_channels],
        }
    }

    pub fn param_count(&self) -> usize {
        let w: usize = self.weight_shape().iter().product();
        w + if self.has_bias { self.out_channels } else { 0 }
    }
}

/// Layer description used to build a [`ModelSpec`]; input channel counts are
/// derived by propagating shapes from the model input.
#[derive(Clone, Debug)]
pub struct LayerDesc {
    pub name: String,
    pub kind: LayerKind,
    pub out_channels: usize,
    pub kernel: Option<(usize, usize)>,
    pub activation: Activation,
    pub has_bias: bool,
}

impl LayerDesc {
    pub fn conv(name: &str, out_channels: usize, kernel: (usize, usize)) -> Self {
        LayerDesc {
            name: name.into(),
            kind: LayerKind::Conv2d,
            out_channels,
            kernel: Some(kernel),
            activation: Activation::Relu,
            has_bias: true,
        }
    }

    pub fn dense(name: &str, out_channels: usize) -> Self {
        LayerDesc {
            name: name.into(),
            kind: LayerKind::Dense,
            out_channels,
            kernel: None,
            activation: Activation::None,
            has_bias: true,
        }
    }

    pub fn with_activation(mut self, a: Activation) -> Self {
        self.activation = a;
        self
    }
}

/// A full architecture: ordered layers plus the input shape they consume.
#[derive(Clone, Debug)]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
    /// Per-sample input shape: `[C,H,W]` for images, `[D]` for flat vectors.
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
}

impl ModelSpec {
    /// Build a spec by propagating feature shapes through the layer chain.
    /// Dense layers consume the flattened current shape.
    pub fn build(input_shape: &[usize], descs: &[LayerDesc], num_classes: usize) -> Result<Self> {
        if descs.is_empty() {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        let mut cur = input_shape.to_vec();
        let mut layers = Vec::with_capacity(descs.len());
        for d in descs {
            if d.out_channels == 0 {
                return Err(Error::Config(format!("layer {} has 0 channels", d.name)));
            }
            let spec = match d.kind {
                LayerKind::Conv2d => {
                    if cur.len() != 3 {
                        return Err(Error::Config(format!(
                            "conv layer {} needs [C,H,W] input, current shape {cur:?}",
                            d.name
                        )));
                    }
                    let (k1, k2) = d
                        .kernel
                        .ok_or_else(|| Error::Config(format!("conv layer {} lacks a kernel", d.name)))?;
                    if cur[1] < k1 || cur[2] < k2 {
                        return Err(Error::Config(format!(
                            "kernel ({k1},{k2}) exceeds feature map {}x{} at layer {}",
                            cur[1], cur[2], d.name
                        )));
                    }
                    let spec = LayerSpec {
                        name: d.name.clone(),
                        kind: LayerKind::Conv2d,
                        in_channels: cur[0],
                        out_channels: d.out_channels,
                        kernel: Some((k1, k2)),
                        activation: d.activation,
                        has_bias: d.has_bias,
                    };
                    cur = vec![d.out_channels, cur[1] - k1 + 1, cur[2] - k2 + 1];
                    spec
                }
                LayerKind::Dense => {
                    let in_features: usize = cur.iter().product();
                    let spec = LayerSpec {
                        name: d.name.clone(),
                        kind: LayerKind::Dense,
                        in_channels: in_features,
                        out_channels: d.out_channels,
                        kernel: None,
                        activation: d.activation,
                        has_bias: d.has_bias,
                    };
                    cur = vec![d.out_channels];
                    spec
                }
            };
            layers.push(spec);
        }
        let last_out = layers.last().unwrap().out_channels;
        if last_out != num_classes {
            return Err(Error::Config(format!(
                "last layer produces {last_out} outputs, expected {num_classes} classes"
            )));
        }
        Ok(ModelSpec {
            layers,
            input_shape: input_shape.to_vec(),
            num_classes,
        })
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    /// Per-layer feature map shapes after each layer, starting from the input.
    pub fn feature_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = vec![self.input_shape.clone()];
        let mut cur = self.input_shape.clone();
        for l in &self.layers {
            cur = match l.kind {
                LayerKind::Conv2d => {
                    let (k1, k2) = l.kernel.unwrap();
                    vec![l.out_channels, cur[1] - k1 + 1, cur[2] - k2 + 1]
                }
                LayerKind::Dense => vec![l.out_channels],
            };
            shapes.push(cur.clone());
        }
        shapes
    }
}

/// Named, shaped parameter tensors of one model instance.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet {
    pub layers: Vec<LayerParams>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub name: String,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl ParameterSet {
    /// Uniform initialization in `±1/sqrt(fan_in)`, deterministic in `seed`.
    pub fn init(spec: &ModelSpec, seed: u64) -> Self {
        let mut rng = rng_from(seed, "model-init");
        let layers = spec
            .layers
            .iter()
            .map(|l| {
                let fan_in = match l.kind {
                    LayerKind::Conv2d => {
                        let (k1, k2) = l.kernel.unwrap();
                        l.in_channels * k1 * k2
                    }
                    LayerKind::Dense => l.in_channels,
                };
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weight = Tensor::rand_uniform(&l.weight_shape(), -bound, bound, &mut rng);
                let bias = l
                    .has_bias
                    .then(|| Tensor::rand_uniform(&[l.out_channels], -bound, bound, &mut rng));
                LayerParams {
                    name: l.name.clone(),
                    weight,
                    bias,
                }
            })
            .collect();
        ParameterSet { layers }
    }

    pub fn zeros(spec: &ModelSpec) -> Self {
        let layers = spec
            .layers
            .iter()
            .map(|l| LayerParams {
                name: l.name.clone(),
                weight: Tensor::zeros(&l.weight_shape()),
                bias: l.has_bias.then(|| Tensor::zeros(&[l.out_channels])),
            })
            .collect();
        ParameterSet { layers }
    }

    pub fn layer(&self, name: &str) -> Option<&LayerParams> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Check that every layer of `spec` has a matching entry with the shapes
    /// the spec demands.
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if self.layers.len() != spec.layers.len() {
            return Err(Error::Config(format!(
                "{} parameter entries for {} layers",
                self.layers.len(),
                spec.layers.len()
            )));
        }
        for (p, l) in self.layers.iter().zip(&spec.layers) {
            if p.name != l.name {
                return Err(Error::Config(format!(
                    "parameter entry {} does not match layer {}",
                    p.name, l.name
                )));
            }
            if p.weight.shape() != l.weight_shape().as_slice() {
                return Err(Error::Config(format!(
                    "layer {}: weight shape {:?}, spec wants {:?}",
                    l.name,
                    p.weight.shape(),
                    l.weight_shape()
                )));
            }
            match (&p.bias, l.has_bias) {
                (Some(b), true) => {
                    if b.shape() != [l.out_channels] {
                        return Err(Error::Config(format!(
                            "layer {}: bias shape {:?}, spec wants [{}]",
                            l.name,
                            b.shape(),
                            l.out_channels
                        )));
                    }
                }
                (None, false) => {}
                _ => {
                    return Err(Error::Config(format!(
                        "layer {}: bias presence disagrees with spec",
                        l.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.as_ref().map_or(0, |b| b.len()))
            .sum()
    }

    /// Flat named view: `<layer>.weight` and `<layer>.bias` entries in order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push((format!("{}.weight", l.name), &l.weight));
            if let Some(b) = &l.bias {
                out.push((format!("{}.bias", l.name), b));
            }
        }
        out
    }

    /// Rebuild from flat named entries, validated against `spec`.
    pub fn from_named_tensors(spec: &ModelSpec, entries: &[(String, Tensor)]) -> Result<Self> {
        let lookup = |name: &str| -> Option<&Tensor> {
            entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
        };
        let mut layers = Vec::new();
        for l in &spec.layers {
            let weight = lookup(&format!("{}.weight", l.name))
                .ok_or_else(|| Error::Format(format!("missing tensor {}.weight", l.name)))?
                .clone();
            let bias = if l.has_bias {
                Some(
                    lookup(&format!("{}.bias", l.name))
                        .ok_or_else(|| Error::Format(format!("missing tensor {}.bias", l.name)))?
                        .clone(),
                )
            } else {
                None
            };
            layers.push(LayerParams {
                name: l.name.clone(),
                weight,
                bias,
            });
        }
        let set = ParameterSet { layers };
        set.validate(spec)?;
        Ok(set)
    }

    /// Euclidean distance between two parameter sets, for tests and reports.
    pub fn l2_distance(&self, other: &ParameterSet) -> Result<f64> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::Input("parameter sets differ in layer count".into()));
        }
        let mut acc = 0.0;
        for (a, b) in self.layers.iter().zip(&other.layers) {
            acc += a.weight.sub(&b.weight)?.data().iter().map(|x| x * x).sum::<f64>();
            match (&a.bias, &b.bias) {
                (Some(x), Some(y)) => {
                    acc += x.sub(y)?.data().iter().map(|v| v * v).sum::<f64>();
                }
                (None, None) => {}
                _ => return Err(Error::Input("bias presence mismatch".into())),
            }
        }
        Ok(acc.sqrt())
    }
}
