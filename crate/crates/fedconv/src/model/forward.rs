//! Forward pass, shared between inference and every training loop.

use super::{Activation, LayerKind, ModelSpec, ParameterSet};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Graph handles for one layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub weight: Var,
    pub bias: Option<Var>,
}

/// Install a parameter set on a graph as leaves.
pub fn param_vars(g: &mut Graph, params: &ParameterSet, trainable: bool) -> Vec<LayerVars> {
    params
        .layers
        .iter()
        .map(|l| {
            let w = if trainable {
                l.weight.clone().with_grad()
            } else {
                l.weight.clone()
            };
            let weight = g.leaf(w);
            let bias = l.bias.as_ref().map(|b| {
                let b = if trainable {
                    b.clone().with_grad()
                } else {
                    b.clone()
                };
                g.leaf(b)
            });
            LayerVars { weight, bias }
        })
        .collect()
}

/// Run the spec's layer chain on graph variables. `layers` may come from
/// [`param_vars`] or from a compression/dilation pipeline.
pub fn forward_vars(
    g: &mut Graph,
    spec: &ModelSpec,
    layers: &[LayerVars],
    batch: Var,
) -> Result<Var> {
    if layers.len() != spec.layers.len() {
        return Err(Error::Input(format!(
            "{} parameter entries for {} layers",
            layers.len(),
            spec.layers.len()
        )));
    }
    let n = g.value(batch).shape()[0];
    let expect: usize = spec.input_shape.iter().product();
    let got: usize = g.value(batch).shape()[1..].iter().product();
    if got != expect {
        return Err(Error::Input(format!(
            "batch sample shape {:?} does not match model input {:?}",
            &g.value(batch).shape()[1..],
            spec.input_shape
        )));
    }
    let mut x = batch;
    for (l, lv) in spec.layers.iter().zip(layers) {
        x = match l.kind {
            LayerKind::Conv2d => {
                if g.value(x).rank() != 4 {
                    let mut s = vec![n];
                    s.extend_from_slice(&spec.input_shape);
                    x = g.reshape(x, &s)?;
                }
                g.conv2d(x, lv.weight, 1, 0)?
            }
            LayerKind::Dense => {
                let flat = g.value(x).len() / n;
                let x2 = g.reshape(x, &[n, flat])?;
                g.matmul_nt(x2, lv.weight)?
            }
        };
        if let Some(b) = lv.bias {
            x = g.add_bias(x, b)?;
        }
        x = match l.activation {
            Activation::Relu => g.relu(x),
            Activation::None => x,
        };
    }
    Ok(x)
}

/// Inference-only forward pass: returns logits `[N, num_classes]`.
pub fn forward(spec: &ModelSpec, params: &ParameterSet, batch: &Tensor) -> Result<Tensor> {
    params.validate(spec)?;
    let mut g = Graph::new();
    let x = g.constant(batch.clone());
    let layers = param_vars(&mut g, params, false);
    let logits = forward_vars(&mut g, spec, &layers, x)?;
    Ok(g.value(logits).clone())
}
