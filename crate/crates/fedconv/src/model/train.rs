//! Mini-batch SGD training and evaluation.

use super::forward::{forward_vars, param_vars};
use super::{ModelSpec, ParameterSet};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tensor::{Graph, Tensor};
use rand::seq::SliceRandom;
use std::collections::BTreeMap;

/// Accuracy and mean loss over a dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub loss: f64,
}

/// One SGD update: `p' = p - lr * g` for every named parameter.
/// Every trainable parameter must have a gradient entry.
pub fn sgd_step(
    params: &ParameterSet,
    grads: &BTreeMap<String, Tensor>,
    lr: f64,
) -> Result<ParameterSet> {
    let mut out = params.clone();
    for l in &mut out.layers {
        apply(&mut l.weight, &format!("{}.weight", l.name), grads, lr)?;
        if let Some(b) = &mut l.bias {
            apply(b, &format!("{}.bias", l.name), grads, lr)?;
        }
    }
    Ok(out)
}

fn apply(p: &mut Tensor, name: &str, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
    let g = grads
        .get(name)
        .ok_or_else(|| Error::Usage(format!("missing gradient for parameter {name}")))?;
    if g.shape() != p.shape() {
        return Err(Error::Usage(format!(
            "gradient shape {:?} does not match parameter {name} {:?}",
            g.shape(),
            p.shape()
        )));
    }
    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
        *pv -= lr * gv;
    }
    Ok(())
}

/// Knobs for [`local_train`].
#[derive(Clone, Copy, Debug)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainOptions {
    pub fn new(epochs: usize, lr: f64, seed: u64) -> Self {
        TrainOptions {
            epochs,
            lr,
            batch_size: 32,
            seed,
        }
    }
}

/// Full passes of mini-batch SGD with cross-entropy. Deterministic in the
/// seed; batch order is reshuffled every epoch.
pub fn local_train(
    spec: &ModelSpec,
    params: &ParameterSet,
    data: &Dataset,
    opts: &TrainOptions,
) -> Result<ParameterSet> {
    if data.is_empty() {
        return Err(Error::Usage("local_train on an empty dataset".into()));
    }
    params.validate(spec)?;
    let mut current = params.clone();
    let mut indices: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..opts.epochs {
        let mut rng = rng_from(opts.seed, &format!("shuffle-epoch{epoch}"));
        indices.shuffle(&mut rng);
        for chunk in indices.chunks(opts.batch_size.max(1)) {
            let (batch, labels) = data.gather(chunk);
            let mut g = Graph::new();
            let x = g.constant(batch);
            let vars = param_vars(&mut g, &current, true);
            let logits = forward_vars(&mut g, spec, &vars, x)?;
            let loss = g.cross_entropy(logits, &labels)?;
            let grads = g.backward(loss)?;
            let mut named = BTreeMap::new();
            for (lv, lp) in vars.iter().zip(&current.layers) {
                if let Some(gw) = grads.get(lv.weight) {
                    named.insert(format!("{}.weight", lp.name), gw.clone());
                }
                if let (Some(bv), Some(_)) = (lv.bias, &lp.bias) {
                    if let Some(gb) = grads.get(bv) {
                        named.insert(format!("{}.bias", lp.name), gb.clone());
                    }
                }
            }
            current = sgd_step(&current, &named, opts.lr)?;
        }
    }
    Ok(current)
}

/// Accuracy (argmax, ties broken toward the lowest class index) and mean
/// cross-entropy loss. Pure: repeated calls give identical results.
pub fn evaluate(spec: &ModelSpec, params: &ParameterSet, data: &Dataset) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Usage("evaluate on an empty dataset".into()));
    }
    params.validate(spec)?;
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(256) {
        let (batch, labels) = data.gather(chunk);
        let logits = super::forward(spec, params, &batch)?;
        let k = spec.num_classes;
        for (row, &label) in labels.iter().enumerate() {
            let r = &logits.data()[row * k..(row + 1) * k];
            let mut best = 0;
            for (j, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = j;
                }
            }
            if best == label {
                correct += 1;
            }
            let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + r.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss_sum += lse - r[label];
        }
    }
    Ok(EvalReport {
        accuracy: correct as f64 / data.len() as f64,
        loss: loss_sum / data.len() as f64,
    })
}
