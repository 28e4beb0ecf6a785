//! Weighted average aggregation of dilated models with learnable per-layer
//! weight vectors, plus the histogram KL-divergence criterion that steers
//! them toward models similar to the previous global model.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{forward_vars, LayerVars, ModelSpec, ParameterSet};
use crate::rng::rng_from;
use crate::tensor::{Graph, Tensor};
use rand::seq::SliceRandom;

/// One scalar per (model, layer), initialized to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightVectors {
    /// `v[model][layer]`
    pub v: Vec<Vec<f64>>,
}

impl WeightVectors {
    pub fn ones(n_models: usize, n_layers: usize) -> Self {
        WeightVectors {
            v: vec![vec![1.0; n_layers]; n_models],
        }
    }

    fn check(&self, n_models: usize, n_layers: usize) -> Result<()> {
        if self.v.len() != n_models || self.v.iter().any(|r| r.len() != n_layers) {
            return Err(Error::Usage(format!(
                "weight vectors sized {}x{:?}, expected {n_models}x{n_layers}",
                self.v.len(),
                self.v.first().map(|r| r.len())
            )));
        }
        if self.v.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("non-finite weight vector entry".into()));
        }
        Ok(())
    }
}

/// Per-model, per-layer (min, max) of pre-normalization parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineRecord {
    /// `(min, max)` per layer, pooled over the layer's weight and bias.
    pub layers: Vec<(f64, f64)>,
}

fn layer_min_max(layer: &crate::model::LayerParams) -> Result<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut scan = |t: &Tensor| -> Result<()> {
        for &x in t.data() {
            if !x.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite parameter in layer {}",
                    layer.name
                )));
            }
            lo = lo.min(x);
            hi = hi.max(x);
        }
        Ok(())
    };
    scan(&layer.weight)?;
    if let Some(b) = &layer.bias {
        scan(b)?;
    }
    Ok((lo, hi))
}

/// Normalize every model's parameters to `[0,1]` per layer, recording the
/// affine maps for de-normalization. A constant layer maps to 0.5 everywhere.
pub fn normalize_params(models: &[ParameterSet]) -> Result<(Vec<ParameterSet>, Vec<AffineRecord>)> {
    if models.is_empty() {
        return Err(Error::Usage("normalize_params on zero models".into()));
    }
    let mut normalized = Vec::with_capacity(models.len());
    let mut records = Vec::with_capacity(models.len());
    for m in models {
        let mut layers = Vec::with_capacity(m.layers.len());
        let mut out_layers = Vec::with_capacity(m.layers.len());
        for l in &m.layers {
            let (lo, hi) = layer_min_max(l)?;
            let map = |t: &Tensor| {
                if hi == lo {
                    Tensor::full(t.shape(), 0.5)
                } else {
                    t.map(|x| (x - lo) / (hi - lo))
                }
            };
            out_layers.push(crate::model::LayerParams {
                name: l.name.clone(),
                weight: map(&l.weight),
                bias: l.bias.as_ref().map(&map),
            });
            layers.push((lo, hi));
        }
        normalized.push(ParameterSet { layers: out_layers });
        records.push(AffineRecord { layers });
    }
    Ok((normalized, records))
}

/// Invert [`normalize_params`] with each model's own affine record.
pub fn denormalize_params(
    normalized: &[ParameterSet],
    records: &[AffineRecord],
) -> Result<Vec<ParameterSet>> {
    if normalized.len() != records.len() {
        return Err(Error::Usage("record count does not match model count".into()));
    }
    normalized
        .iter()
        .zip(records)
        .map(|(m, rec)| {
            let layers = m
                .layers
                .iter()
                .zip(&rec.layers)
                .map(|(l, &(lo, hi))| {
                    let map = |t: &Tensor| {
                        if hi == lo {
                            Tensor::full(t.shape(), lo)
                        } else {
                            t.map(|x| x * (hi - lo) + lo)
                        }
                    };
                    crate::model::LayerParams {
                        name: l.name.clone(),
                        weight: map(&l.weight),
                        bias: l.bias.as_ref().map(&map),
                    }
                })
                .collect();
            Ok(ParameterSet { layers })
        })
        .collect()
}

fn check_aggregation_inputs(models: &[ParameterSet], samples: &[usize]) -> Result<()> {
    if models.is_empty() {
        return Err(Error::Usage("aggregation of zero models".into()));
    }
    if models.len() != samples.len() {
        return Err(Error::Usage(format!(
            "{} models but {} sample counts",
            models.len(),
            samples.len()
        )));
    }
    if samples.iter().any(|&s| s == 0) {
        return Err(Error::Usage("every sample count must be positive".into()));
    }
    let first = &models[0];
    for m in &models[1..] {
        if m.layers.len() != first.layers.len() {
            return Err(Error::Usage("models disagree in layer count".into()));
        }
        for (a, b) in m.layers.iter().zip(&first.layers) {
            if a.weight.shape() != b.weight.shape() {
                return Err(Error::Usage(format!(
                    "layer {} shapes differ across models",
                    a.name
                )));
            }
        }
    }
    Ok(())
}

/// Per-layer weighted average: `W_l = sum_j v[j][l] * s_j * w[j][l] / sum_j s_j`.
///
/// The layer weight vector applies to the layer's weight and bias alike.
/// Normalizing to `[0,1]` and mapping each model's contribution back with its
/// own affine record cancels algebraically, so the sum is computed on the raw
/// parameters; with `v` at its initialization of all ones this reduces
/// exactly to the sample-weighted average.
pub fn weighted_aggregate(
    models: &[ParameterSet],
    v: &WeightVectors,
    samples: &[usize],
) -> Result<ParameterSet> {
    check_aggregation_inputs(models, samples)?;
    let n_layers = models[0].layers.len();
    v.check(models.len(), n_layers)?;
    let total: f64 = samples.iter().map(|&s| s as f64).sum();
    let mut layers = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let mut weight = Tensor::zeros(models[0].layers[l].weight.shape());
        let mut bias = models[0].layers[l]
            .bias
            .as_ref()
            .map(|b| Tensor::zeros(b.shape()));
        for (j, m) in models.iter().enumerate() {
            let coef = v.v[j][l] * samples[j] as f64 / total;
            for (acc, &x) in weight.data_mut().iter_mut().zip(m.layers[l].weight.data()) {
                *acc += coef * x;
            }
            if let (Some(acc_b), Some(mb)) = (&mut bias, &m.layers[l].bias) {
                for (acc, &x) in acc_b.data_mut().iter_mut().zip(mb.data()) {
                    *acc += coef * x;
                }
            }
        }
        layers.push(crate::model::LayerParams {
            name: models[0].layers[l].name.clone(),
            weight,
            bias,
        });
    }
    Ok(ParameterSet { layers })
}

/// Sample-weighted average with all weight vectors fixed at 1 (the ablation
/// baseline).
pub fn naive_average(models: &[ParameterSet], samples: &[usize]) -> Result<ParameterSet> {
    let n_layers = models.first().map(|m| m.layers.len()).unwrap_or(0);
    weighted_aggregate(models, &WeightVectors::ones(models.len(), n_layers), samples)
}

/// Histogram KL divergence `KL(p || q)` between two probability vectors.
fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum()
}

const KLD_SMOOTHING: f64 = 1e-8;

fn layer_values(l: &crate::model::LayerParams) -> Vec<f64> {
    let mut vals = l.weight.data().to_vec();
    if let Some(b) = &l.bias {
        vals.extend_from_slice(b.data());
    }
    vals
}

fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let mut counts = vec![KLD_SMOOTHING; bins];
    let width = (hi - lo) / bins as f64;
    for &x in values {
        let idx = if width > 0.0 {
            (((x - lo) / width) as usize).min(bins - 1)
        } else {
            0
        };
        counts[idx] += 1.0;
    }
    let total: f64 = counts.iter().sum();
    counts.iter_mut().for_each(|c| *c /= total);
    counts
}

/// Histogram KL divergence between the previous global model and a dilated
/// model, summed over layers: bins over the union value range per layer,
/// smoothing 1e-8, natural log.
pub fn kld(model: &ParameterSet, global_prev: &ParameterSet, bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(Error::Usage("kld needs at least 2 bins".into()));
    }
    if model.layers.len() != global_prev.layers.len() {
        return Err(Error::Usage("models disagree in layer count".into()));
    }
    let mut total = 0.0;
    for (lm, lg) in model.layers.iter().zip(&global_prev.layers) {
        let vm = layer_values(lm);
        let vg = layer_values(lg);
        if vm.is_empty() || vg.is_empty() {
            return Err(Error::Usage(format!("empty layer {}", lm.name)));
        }
        let lo = vm
            .iter()
            .chain(&vg)
            .cloned()
            .fold(f64::INFINITY, f64::min);
        let hi = vm
            .iter()
            .chain(&vg)
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite parameters in layer {}",
                lm.name
            )));
        }
        let p = histogram(&vg, lo, hi, bins);
        let q = histogram(&vm, lo, hi, bins);
        total += kl_divergence(&p, &q);
    }
    Ok(total)
}

/// Knobs for [`tune_weight_vectors`].
#[derive(Clone, Copy, Debug)]
pub struct TuneOptions {
    pub epochs: usize,
    pub lr: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub kld_bins: usize,
    pub seed: u64,
}

impl TuneOptions {
    /// Evaluation defaults: 10 epochs, lr 0.001, lambda 0.2, 64 bins.
    pub fn defaults(seed: u64) -> Self {
        TuneOptions {
            epochs: 10,
            lr: 0.001,
            lambda: 0.2,
            batch_size: 32,
            kld_bins: 64,
            seed,
        }
    }
}

/// Gradient-descend the weight vectors on the server cross-entropy of the
/// aggregated model. The histogram KLD terms are piecewise-constant in `v`,
/// so each descent step additionally decays `v[j]` by
/// `exp(-lr * lambda * KLD_j)`: models that diverged from the previous
/// global model contribute less unless the data term earns it back.
pub fn tune_weight_vectors(
    models: &[ParameterSet],
    global_prev: &ParameterSet,
    server_data: &Dataset,
    spec: &ModelSpec,
    samples: &[usize],
    opts: &TuneOptions,
) -> Result<WeightVectors> {
    check_aggregation_inputs(models, samples)?;
    if server_data.is_empty() {
        return Err(Error::Usage("tune_weight_vectors on empty server data".into()));
    }
    if opts.lambda < 0.0 {
        return Err(Error::Config("lambda must be non-negative".into()));
    }
    let n_models = models.len();
    let n_layers = models[0].layers.len();
    let mut v = WeightVectors::ones(n_models, n_layers);
    if opts.epochs == 0 {
        return Ok(v);
    }
    let klds: Vec<f64> = models
        .iter()
        .map(|m| kld(m, global_prev, opts.kld_bins))
        .collect::<Result<_>>()?;
    let decay: Vec<f64> = klds
        .iter()
        .map(|&k| (-opts.lr * opts.lambda * k).exp())
        .collect();
    let total: f64 = samples.iter().map(|&s| s as f64).sum();

    let mut indices: Vec<usize> = (0..server_data.len()).collect();
    for epoch in 0..opts.epochs {
        let mut rng = rng_from(opts.seed, &format!("agg-tune-epoch{epoch}"));
        indices.shuffle(&mut rng);
        for chunk in indices.chunks(opts.batch_size.max(1)) {
            let (batch, labels) = server_data.gather(chunk);
            let mut g = Graph::new();
            // leaves for every v[j][l]
            let v_vars: Vec<Vec<crate::tensor::Var>> = v
                .v
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|&x| g.leaf(Tensor::scalar(x).with_grad()))
                        .collect()
                })
                .collect();
            // aggregated layers as graph nodes
            let mut layer_vars = Vec::with_capacity(n_layers);
            for l in 0..n_layers {
                let mut w_acc = None;
                let mut b_acc: Option<crate::tensor::Var> = None;
                for (j, m) in models.iter().enumerate() {
                    let coef = samples[j] as f64 / total;
                    let wj = g.constant(m.layers[l].weight.clone());
                    let wj = g.scale(wj, v_vars[j][l])?;
                    let wj = g.scale_const(wj, coef);
                    w_acc = Some(match w_acc {
                        None => wj,
                        Some(acc) => g.add(acc, wj)?,
                    });
                    if let Some(bias) = &m.layers[l].bias {
                        let bj = g.constant(bias.clone());
                        let bj = g.scale(bj, v_vars[j][l])?;
                        let bj = g.scale_const(bj, coef);
                        b_acc = Some(match b_acc {
                            None => bj,
                            Some(acc) => g.add(acc, bj)?,
                        });
                    }
                }
                layer_vars.push(LayerVars {
                    weight: w_acc.expect("at least one model"),
                    bias: b_acc,
                });
            }
            let x = g.constant(batch);
            let logits = forward_vars(&mut g, spec, &layer_vars, x)?;
            let loss = g.cross_entropy(logits, &labels)?;
            let grads = g.backward(loss)?;
            for j in 0..n_models {
                for l in 0..n_layers {
                    if let Some(gv) = grads.get(v_vars[j][l]) {
                        v.v[j][l] -= opts.lr * gv.data()[0];
                    }
                    v.v[j][l] *= decay[j];
                }
            }
        }
    }
    v.check(n_models, n_layers)?;
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LayerDesc, LayerParams};

    fn scalar_model(name_values: &[(&str, f64)]) -> ParameterSet {
        ParameterSet {
            layers: name_values
                .iter()
                .map(|(name, v)| LayerParams {
                    name: (*name).into(),
                    weight: Tensor::new(vec![1, 1], vec![*v]).unwrap(),
                    bias: None,
                })
                .collect(),
        }
    }

    #[test]
    fn normalize_maps_to_unit_range() {
        let m = ParameterSet {
            layers: vec![LayerParams {
                name: "l".into(),
                weight: Tensor::new(vec![3], vec![-1.0, 0.0, 1.0]).unwrap(),
                bias: None,
            }],
        };
        let (norm, recs) = normalize_params(&[m]).unwrap();
        assert_eq!(norm[0].layers[0].weight.data(), &[0.0, 0.5, 1.0]);
        assert_eq!(recs[0].layers[0], (-1.0, 1.0));
    }

    #[test]
    fn constant_layer_normalizes_to_half() {
        let m = ParameterSet {
            layers: vec![LayerParams {
                name: "l".into(),
                weight: Tensor::full(&[3], 4.2),
                bias: None,
            }],
        };
        let (norm, recs) = normalize_params(&[m.clone()]).unwrap();
        assert_eq!(norm[0].layers[0].weight.data(), &[0.5, 0.5, 0.5]);
        let back = denormalize_params(&norm, &recs).unwrap();
        assert_eq!(back[0], m);
    }

    #[test]
    fn normalize_roundtrip_on_random_models() {
        let spec = crate::model::ModelSpec::build(
            &[1, 6, 6],
            &[LayerDesc::conv("c", 3, (3, 3)), LayerDesc::dense("f", 4)],
            4,
        )
        .unwrap();
        let models: Vec<ParameterSet> =
            (0..3).map(|i| ParameterSet::init(&spec, i)).collect();
        let (norm, recs) = normalize_params(&models).unwrap();
        for m in &norm {
            for l in &m.layers {
                assert!(l.weight.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
            }
        }
        let back = denormalize_params(&norm, &recs).unwrap();
        for (a, b) in back.iter().zip(&models) {
            assert!(a.l2_distance(b).unwrap() < 1e-12);
        }
    }

    #[test]
    fn nan_input_is_numerical_error() {
        let m = ParameterSet {
            layers: vec![LayerParams {
                name: "l".into(),
                weight: Tensor::new(vec![2], vec![f64::NAN, 0.0]).unwrap(),
                bias: None,
            }],
        };
        assert!(matches!(
            normalize_params(&[m]),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn eq4_hand_cases() {
        // single model, v = 1 -> identity
        let m1 = scalar_model(&[("l", 0.3)]);
        let out = weighted_aggregate(&[m1.clone()], &WeightVectors::ones(1, 1), &[5]).unwrap();
        assert_eq!(out, m1);

        // equal samples, v = 1, values 0.2 / 0.8 -> 0.5
        let a = scalar_model(&[("l", 0.2)]);
        let b = scalar_model(&[("l", 0.8)]);
        let out = naive_average(&[a, b], &[3, 3]).unwrap();
        assert!((out.layers[0].weight.data()[0] - 0.5).abs() < 1e-15);

        // v1=0.5, s1=2, w1=1.0; v2=1.0, s2=2, w2=3.0 -> 1.75
        let a = scalar_model(&[("l", 1.0)]);
        let b = scalar_model(&[("l", 3.0)]);
        let v = WeightVectors {
            v: vec![vec![0.5], vec![1.0]],
        };
        let out = weighted_aggregate(&[a, b], &v, &[2, 2]).unwrap();
        assert!((out.layers[0].weight.data()[0] - 1.75).abs() < 1e-15);
    }

    #[test]
    fn mismatched_lengths_are_usage_errors() {
        let a = scalar_model(&[("l", 1.0)]);
        assert!(weighted_aggregate(&[a.clone()], &WeightVectors::ones(1, 1), &[]).is_err());
        assert!(weighted_aggregate(&[a.clone()], &WeightVectors::ones(2, 1), &[1]).is_err());
        assert!(weighted_aggregate(&[a], &WeightVectors::ones(1, 1), &[0]).is_err());
    }

    #[test]
    fn naive_equals_weighted_at_ones_and_identical_models_average_to_themselves() {
        let spec = crate::model::ModelSpec::build(&[4], &[LayerDesc::dense("f", 3)], 3).unwrap();
        let m1 = ParameterSet::init(&spec, 1);
        let m2 = ParameterSet::init(&spec, 2);
        let nv = naive_average(&[m1.clone(), m2.clone()], &[3, 7]).unwrap();
        let wv = weighted_aggregate(
            &[m1.clone(), m2],
            &WeightVectors::ones(2, 1),
            &[3, 7],
        )
        .unwrap();
        assert_eq!(nv, wv);
        let same = naive_average(&[m1.clone(), m1.clone()], &[2, 5]).unwrap();
        assert!(same.l2_distance(&m1).unwrap() < 1e-12);
    }

    #[test]
    fn convex_combination_bound_in_normalized_space() {
        let spec = crate::model::ModelSpec::build(&[4], &[LayerDesc::dense("f", 3)], 3).unwrap();
        let models: Vec<ParameterSet> = (0..4).map(|i| ParameterSet::init(&spec, i)).collect();
        let (norm, _) = normalize_params(&models).unwrap();
        let agg = naive_average(&norm, &[1, 2, 3, 4]).unwrap();
        for idx in 0..agg.layers[0].weight.len() {
            let vals: Vec<f64> = norm.iter().map(|m| m.layers[0].weight.data()[idx]).collect();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let x = agg.layers[0].weight.data()[idx];
            assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
        }
    }

    #[test]
    fn kld_zero_for_identical_and_nonnegative() {
        let spec = crate::model::ModelSpec::build(&[6], &[LayerDesc::dense("f", 3)], 3).unwrap();
        let m = ParameterSet::init(&spec, 3);
        assert!(kld(&m, &m, 64).unwrap().abs() < 1e-10);
        for i in 0..5 {
            let a = ParameterSet::init(&spec, i);
            let b = ParameterSet::init(&spec, i + 100);
            assert!(kld(&a, &b, 32).unwrap() >= 0.0);
        }
        assert!(kld(&m, &m, 1).is_err());
    }

    #[test]
    fn kld_two_bin_hand_case() {
        // histograms p=(1/2,1/2) vs q=(1/4,3/4) over the same range
        let a = ParameterSet {
            layers: vec![LayerParams {
                name: "l".into(),
                weight: Tensor::new(vec![4], vec![0.0, 0.0, 1.0, 1.0]).unwrap(),
                bias: None,
            }],
        };
        let b = ParameterSet {
            layers: vec![LayerParams {
                name: "l".into(),
                weight: Tensor::new(vec![4], vec![0.0, 1.0, 1.0, 1.0]).unwrap(),
                bias: None,
            }],
        };
        // KL(global_prev=a || model=b)
        let expect = 0.5 * (2.0f64).ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((kld(&b, &a, 2).unwrap() - expect).abs() < 1e-6);
        assert!((expect - 0.14384).abs() < 1e-5);
    }

    #[test]
    fn tune_zero_epochs_returns_ones() {
        let spec = crate::model::ModelSpec::build(&[4], &[LayerDesc::dense("f", 3)], 3).unwrap();
        let models: Vec<ParameterSet> = (0..2).map(|i| ParameterSet::init(&spec, i)).collect();
        let data = crate::data::gen_synthetic(3, 10, &[4], 6.0, 1).unwrap();
        let mut opts = TuneOptions::defaults(3);
        opts.epochs = 0;
        let v = tune_weight_vectors(&models, &models[0], &data, &spec, &[5, 5], &opts).unwrap();
        assert_eq!(v, WeightVectors::ones(2, 1));
    }

    #[test]
    fn uniform_scaling_of_all_layer_weights_preserves_accuracy() {
        // scaling every model's v jointly in each layer scales the logits,
        // leaving the argmax unchanged
        let spec = crate::model::ModelSpec::build(&[4], &[LayerDesc::dense("f", 3)], 3).unwrap();
        let data = crate::data::gen_synthetic(3, 30, &[4], 8.0, 5).unwrap();
        let m1 = crate::model::local_train(
            &spec,
            &ParameterSet::init(&spec, 1),
            &data,
            &crate::model::TrainOptions::new(3, 0.1, 2),
        )
        .unwrap();
        let m2 = ParameterSet::init(&spec, 9);
        let models = [m1, m2];
        let base = weighted_aggregate(&models, &WeightVectors::ones(2, 1), &[4, 4]).unwrap();
        let scaled_v = WeightVectors {
            v: vec![vec![2.5], vec![2.5]],
        };
        let scaled = weighted_aggregate(&models, &scaled_v, &[4, 4]).unwrap();
        let acc_base = crate::model::evaluate(&spec, &base, &data).unwrap().accuracy;
        let acc_scaled = crate::model::evaluate(&spec, &scaled, &data).unwrap().accuracy;
        assert_eq!(acc_base, acc_scaled);
    }

    #[test]
    fn tuning_does_not_increase_server_loss() {
        let spec = crate::model::ModelSpec::build(&[4], &[LayerDesc::dense("f", 3)], 3).unwrap();
        let data = crate::data::gen_synthetic(3, 40, &[4], 6.0, 5).unwrap();
        // one decent model, one random one
        let good = crate::model::local_train(
            &spec,
            &ParameterSet::init(&spec, 1),
            &data,
            &crate::model::TrainOptions::new(4, 0.1, 2),
        )
        .unwrap();
        let noisy = ParameterSet::init(&spec, 50);
        let models = [good, noisy];
        let samples = [20, 20];
        let v0 = WeightVectors::ones(2, 1);
        let before = weighted_aggregate(&models, &v0, &samples).unwrap();
        let loss_before = crate::model::evaluate(&spec, &before, &data).unwrap().loss;

        let opts = TuneOptions::defaults(3);
        let v = tune_weight_vectors(&models, &models[0], &data, &spec, &samples, &opts).unwrap();
        let after = weighted_aggregate(&models, &v, &samples).unwrap();
        let loss_after = crate::model::evaluate(&spec, &after, &data).unwrap().loss;
        assert!(
            loss_after <= loss_before + 1e-9,
            "tuning raised loss {loss_before} -> {loss_after}"
        );
    }

    #[test]
    fn kld_decay_shrinks_dissimilar_models_faster() {
        let spec = crate::model::ModelSpec::build(&[4], &[LayerDesc::dense("f", 3)], 3).unwrap();
        let data = crate::data::gen_synthetic(3, 20, &[4], 6.0, 5).unwrap();
        let global_prev = ParameterSet::init(&spec, 1);
        // similar: the previous global itself; dissimilar: shifted far away
        let similar = global_prev.clone();
        let mut far = global_prev.clone();
        for l in &mut far.layers {
            let shifted = l.weight.map(|x| x * 40.0 + 3.0);
            l.weight = shifted;
        }
        let models = [similar, far];
        let mut opts = TuneOptions::defaults(3);
        opts.lambda = 50.0;
        opts.epochs = 3;
        let v = tune_weight_vectors(&models, &global_prev, &data, &spec, &[5, 5], &opts).unwrap();
        // the dissimilar model's weight ends strictly lower
        assert!(v.v[1][0] < v.v[0][0]);
    }
}
