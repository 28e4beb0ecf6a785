//! Comparative apparatus: mutual-information estimation between parameter
//! sets, magnitude pruning at channel and filter level, and the FedAvg
//! baseline that assigns the smallest affordable model to every client.

use crate::data::ExperimentConfig;
use crate::error::{Error, Result};
use crate::federation::Federation;
use crate::model::{evaluate, local_train, LayerKind, ModelSpec, ParameterSet, TrainOptions};
use crate::report::RoundReport;
use crate::rng::sub_seed;
use crate::tensor::Tensor;
use rayon::prelude::*;
use std::time::Instant;

/// Histogram plug-in mutual-information estimate.
#[derive(Clone, Copy, Debug)]
pub struct MIEstimate {
    pub nats: f64,
    pub bits: f64,
    pub bins: usize,
    /// Number of value pairs entering the joint histogram.
    pub pairs: usize,
}

fn flatten(params: &ParameterSet) -> Vec<f64> {
    let mut out = Vec::new();
    for l in &params.layers {
        out.extend_from_slice(l.weight.data());
        if let Some(b) = &l.bias {
            out.extend_from_slice(b.data());
        }
    }
    out
}

/// Pair two value sets for the joint histogram.
///
/// Equal-length sets pair by index. Unequal sets are each sorted and paired
/// by rank after subsampling the larger to the smaller's length at evenly
/// spaced ranks — a deterministic protocol for comparing models of different
/// sizes.
fn pair_values(mut a: Vec<f64>, mut b: Vec<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() == b.len() {
        return Ok((a, b));
    }
    if a.len().min(b.len()) < 2 {
        return Err(Error::Usage("need at least two values per side".into()));
    }
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let subsample = |v: &[f64], target: usize| -> Vec<f64> {
        let n = v.len();
        (0..target)
            .map(|i| {
                let idx = (i as f64 * (n - 1) as f64 / (target - 1) as f64).round() as usize;
                v[idx]
            })
            .collect()
    };
    if a.len() > b.len() {
        let a = subsample(&a, b.len());
        Ok((a, b))
    } else {
        let b = subsample(&b, a.len());
        Ok((a, b))
    }
}

/// Plug-in mutual information between the parameters of two models from a
/// 2-D joint histogram with `bins` buckets per axis.
pub fn mutual_information(a: &ParameterSet, b: &ParameterSet, bins: usize) -> Result<MIEstimate> {
    if bins < 2 {
        return Err(Error::Usage("mutual_information needs at least 2 bins".into()));
    }
    let va = flatten(a);
    let vb = flatten(b);
    if va.is_empty() || vb.is_empty() {
        return Err(Error::Usage("mutual_information on empty parameters".into()));
    }
    let (xa, xb) = pair_values(va, vb)?;
    let pairs = xa.len();
    let range = |v: &[f64]| -> Result<(f64, f64)> {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Numerical("non-finite parameter values".into()));
        }
        Ok((lo, hi))
    };
    let (alo, ahi) = range(&xa)?;
    let (blo, bhi) = range(&xb)?;
    let bucket = |x: f64, lo: f64, hi: f64| -> usize {
        if hi > lo {
            (((x - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1)
        } else {
            0
        }
    };
    let mut joint = vec![0.0f64; bins * bins];
    for (&x, &y) in xa.iter().zip(&xb) {
        joint[bucket(x, alo, ahi) * bins + bucket(y, blo, bhi)] += 1.0;
    }
    let total = pairs as f64;
    let mut px = vec![0.0; bins];
    let mut py = vec![0.0; bins];
    for i in 0..bins {
        for j in 0..bins {
            let p = joint[i * bins + j] / total;
            px[i] += p;
            py[j] += p;
        }
    }
    let mut nats = 0.0;
    for i in 0..bins {
        for j in 0..bins {
            let p = joint[i * bins + j] / total;
            if p > 0.0 {
                nats += p * (p / (px[i] * py[j])).ln();
            }
        }
    }
    Ok(MIEstimate {
        nats,
        bits: nats / std::f64::consts::LN_2,
        bins,
        pairs,
    })
}

/// Which structural unit magnitude pruning removes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PruneLevel {
    /// Remove input channels of the downstream layer (ranked by the L1 norm
    /// of the downstream weight's input slices).
    Channel,
    /// Remove output filters of the upstream layer (ranked by the L1 norm of
    /// the upstream weight's filter slices).
    Filter,
}

/// Prune each inter-layer channel interface down to `round(ratio * c)`
/// channels by L1-magnitude ranking, reshaping adjacent layers consistently.
/// The model input and the class outputs are untouched. Returns the pruned
/// parameters and their architecture.
pub fn magnitude_prune(
    params: &ParameterSet,
    spec: &ModelSpec,
    ratio: f64,
    level: PruneLevel,
) -> Result<(ParameterSet, ModelSpec)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("prune ratio {ratio} outside (0, 1)")));
    }
    params.validate(spec)?;
    let n_layers = spec.layers.len();
    let shapes = spec.feature_shapes();

    // kept output-channel indices per layer (ascending), classes untouched
    let mut kept: Vec<Vec<usize>> = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let c = spec.layers[l].out_channels;
        if l + 1 == n_layers {
            kept.push((0..c).collect());
            continue;
        }
        let keep_k = (c as f64 * ratio).round() as usize;
        if keep_k < 1 {
            return Err(Error::Config(format!(
                "ratio {ratio} prunes layer {} to zero channels",
                spec.layers[l].name
            )));
        }
        let norms: Vec<f64> = match level {
            PruneLevel::Filter => {
                let w = &params.layers[l].weight;
                let per = w.len() / c;
                (0..c)
                    .map(|o| w.data()[o * per..(o + 1) * per].iter().map(|x| x.abs()).sum())
                    .collect()
            }
            PruneLevel::Channel => {
                let down = &params.layers[l + 1];
                let down_spec = &spec.layers[l + 1];
                match down_spec.kind {
                    LayerKind::Conv2d => {
                        let s = down.weight.shape();
                        let (o, i, k1, k2) = (s[0], s[1], s[2], s[3]);
                        let mut norms = vec![0.0; i];
                        for oo in 0..o {
                            for ii in 0..i {
                                norms[ii] += down.weight.data()
                                    [((oo * i + ii) * k1 * k2)..((oo * i + ii + 1) * k1 * k2)]
                                    .iter()
                                    .map(|x| x.abs())
                                    .sum::<f64>();
                            }
                        }
                        norms
                    }
                    LayerKind::Dense => {
                        // input features group into per-channel blocks of the
                        // flattened feature map
                        let block: usize = shapes[l + 1][1..].iter().product::<usize>().max(1);
                        let s = down.weight.shape();
                        let (o, i) = (s[0], s[1]);
                        let channels = i / block;
                        let mut norms = vec![0.0; channels];
                        for oo in 0..o {
                            let row = &down.weight.data()[oo * i..(oo + 1) * i];
                            for ch in 0..channels {
                                norms[ch] += row[ch * block..(ch + 1) * block]
                                    .iter()
                                    .map(|x| x.abs())
                                    .sum::<f64>();
                            }
                        }
                        norms
                    }
                }
            }
        };
        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by(|&x, &y| {
            norms[y]
                .partial_cmp(&norms[x])
                .unwrap()
                .then(x.cmp(&y))
        });
        let mut keep: Vec<usize> = order[..keep_k].to_vec();
        keep.sort_unstable();
        kept.push(keep);
    }

    // pruned architecture
    let descs: Vec<crate::model::LayerDesc> = spec
        .layers
        .iter()
        .zip(&kept)
        .map(|(l, k)| crate::model::LayerDesc {
            name: l.name.clone(),
            kind: l.kind,
            out_channels: k.len(),
            kernel: l.kernel,
            activation: l.activation,
            has_bias: l.has_bias,
        })
        .collect();
    let pruned_spec = ModelSpec::build(&spec.input_shape, &descs, spec.num_classes)?;

    // rebuild tensors: keep filters of layer l and input slices of layer l+1
    let mut layers = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let lp = &params.layers[l];
        let keep_out = &kept[l];
        let keep_in: Vec<usize> = if l == 0 {
            (0..spec.layers[0].in_channels).collect()
        } else {
            kept[l - 1].clone()
        };
        let weight = match spec.layers[l].kind {
            LayerKind::Conv2d => {
                let s = lp.weight.shape();
                let (i, k1, k2) = (s[1], s[2], s[3]);
                let mut data = Vec::with_capacity(keep_out.len() * keep_in.len() * k1 * k2);
                for &o in keep_out {
                    for &ii in &keep_in {
                        let base = (o * i + ii) * k1 * k2;
                        data.extend_from_slice(&lp.weight.data()[base..base + k1 * k2]);
                    }
                }
                Tensor::new(vec![keep_out.len(), keep_in.len(), k1, k2], data)?
            }
            LayerKind::Dense => {
                let s = lp.weight.shape();
                let in_features = s[1];
                // dense input follows the upstream feature map: kept channels
                // select whole blocks of the flattened map
                let block: usize = shapes[l][1..].iter().product::<usize>().max(1);
                let upstream_channels = if l == 0 {
                    in_features / block
                } else {
                    spec.layers[l - 1].out_channels
                };
                let keep_blocks: Vec<usize> = if l == 0 {
                    (0..upstream_channels).collect()
                } else {
                    kept[l - 1].clone()
                };
                let mut data =
                    Vec::with_capacity(keep_out.len() * keep_blocks.len() * block);
                for &o in keep_out {
                    let row = &lp.weight.data()[o * in_features..(o + 1) * in_features];
                    for &ch in &keep_blocks {
                        data.extend_from_slice(&row[ch * block..(ch + 1) * block]);
                    }
                }
                Tensor::new(vec![keep_out.len(), keep_blocks.len() * block], data)?
            }
        };
        let bias = match &lp.bias {
            Some(b) => {
                let data: Vec<f64> = keep_out.iter().map(|&o| b.data()[o]).collect();
                Some(Tensor::new(vec![keep_out.len()], data)?)
            }
            None => None,
        };
        layers.push(crate::model::LayerParams {
            name: lp.name.clone(),
            weight,
            bias,
        });
    }
    let pruned = ParameterSet { layers };
    pruned.validate(&pruned_spec)?;
    Ok((pruned, pruned_spec))
}

/// Classical FedAvg over clients that all receive the smallest affordable
/// architecture (the minimum shrinkage ratio, built directly at that size).
/// Uses the same splits, partitions, and seeds as the main run.
pub fn fedavg_baseline(config: ExperimentConfig) -> Result<Vec<RoundReport>> {
    let rounds = config.rounds;
    let pretrain_epochs = if config.flags.pretrain {
        config.hyper.pretrain_epochs
    } else {
        0
    };
    let fed = Federation::prepare(config)?;
    let h = fed.config.hyper.clone();
    let seed = fed.config.seed;
    let small_spec = fed.device_types[0].plan.sub_spec.clone();

    let mut global = ParameterSet::init(&small_spec, seed);
    if pretrain_epochs > 0 {
        global = local_train(
            &small_spec,
            &global,
            &fed.server_train,
            &TrainOptions {
                epochs: pretrain_epochs,
                lr: h.local_lr,
                batch_size: h.batch_size,
                seed: sub_seed(seed, "pretrain"),
            },
        )?;
    }

    let mut reports = Vec::with_capacity(rounds);
    for r in 1..=rounds {
        let started = Instant::now();
        let results: Vec<(ParameterSet, f64, usize)> = fed
            .clients
            .par_iter()
            .map(|client| {
                let opts = TrainOptions {
                    epochs: h.local_epochs,
                    lr: h.local_lr,
                    batch_size: h.batch_size,
                    seed: sub_seed(seed, &format!("client{}.round{r}.local", client.client_id)),
                };
                let trained = local_train(&small_spec, &global, &client.train, &opts)?;
                let acc = evaluate(&small_spec, &trained, &client.test)?.accuracy;
                Ok((trained, acc, client.sample_count))
            })
            .collect::<Result<_>>()?;

        // direct sample-weighted average
        let total: f64 = results.iter().map(|(_, _, s)| *s as f64).sum();
        let mut agg = ParameterSet::zeros(&small_spec);
        for (params, _, s) in &results {
            let w = *s as f64 / total;
            for (al, pl) in agg.layers.iter_mut().zip(&params.layers) {
                for (a, &p) in al.weight.data_mut().iter_mut().zip(pl.weight.data()) {
                    *a += w * p;
                }
                if let (Some(ab), Some(pb)) = (&mut al.bias, &pl.bias) {
                    for (a, &p) in ab.data_mut().iter_mut().zip(pb.data()) {
                        *a += w * p;
                    }
                }
            }
        }
        global = agg;

        let geval = evaluate(&small_spec, &global, &fed.server_test)?;
        let client_accuracies: Vec<f64> = results.iter().map(|(_, a, _)| *a).collect();
        let mean_client_accuracy =
            client_accuracies.iter().sum::<f64>() / client_accuracies.len() as f64;
        reports.push(RoundReport {
            round: r,
            global_accuracy: geval.accuracy,
            global_loss: geval.loss,
            client_accuracies,
            mean_client_accuracy,
            weight_vectors: Vec::new(),
            elapsed_seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(reports)
}

/// Results of the compression-vs-pruning information study.
#[derive(Clone, Copy, Debug)]
pub struct MiStudy {
    pub self_mi: MIEstimate,
    pub compressed_mi: MIEstimate,
    pub channel_pruned_mi: MIEstimate,
    pub filter_pruned_mi: MIEstimate,
    pub global_accuracy: f64,
    pub compressed_accuracy: f64,
    pub channel_pruned_accuracy: f64,
    pub filter_pruned_accuracy: f64,
}

/// Knobs for [`compression_vs_pruning_study`].
#[derive(Clone, Copy, Debug)]
pub struct MiStudyOptions {
    pub sr: f64,
    pub bins: usize,
    pub train_epochs: usize,
    pub train_lr: f64,
}

impl Default for MiStudyOptions {
    fn default() -> Self {
        MiStudyOptions {
            sr: 0.75,
            bins: 32,
            train_epochs: 4,
            train_lr: 0.05,
        }
    }
}

/// Train a model, compress it with a fine-tuned convolution pipeline, prune
/// it at both levels to the same ratio, and measure parameter mutual
/// information plus test accuracy of each variant.
pub fn compression_vs_pruning_study(
    config: &ExperimentConfig,
    opts: &MiStudyOptions,
) -> Result<MiStudy> {
    let spec = config.model_spec()?;
    let data = config.load_dataset()?;
    let splits = crate::federation::split_dataset(&data, config.seed)?;

    let global = local_train(
        &spec,
        &ParameterSet::init(&spec, config.seed),
        &splits.client_train,
        &TrainOptions {
            epochs: opts.train_epochs,
            lr: opts.train_lr,
            batch_size: config.hyper.batch_size,
            seed: sub_seed(config.seed, "mi-study-train"),
        },
    )?;

    let plan = crate::compress::derive_plan(&spec, opts.sr, crate::compress::KernelPolicy::Auto)?;
    let cp = crate::compress::ConvParams::init(&plan, sub_seed(config.seed, "mi-study-conv"));
    let ft = crate::compress::FinetuneOptions::defaults(sub_seed(config.seed, "mi-study-finetune"));
    let cp = crate::compress::finetune_compression(&global, &plan, &cp, &splits.server_train, &ft)?;
    let compressed = crate::compress::compress_model(&global, &plan, &cp, ft.s_p, ft.s_n)?;

    let (ch_pruned, ch_spec) = magnitude_prune(&global, &spec, opts.sr, PruneLevel::Channel)?;
    let (fl_pruned, fl_spec) = magnitude_prune(&global, &spec, opts.sr, PruneLevel::Filter)?;

    Ok(MiStudy {
        self_mi: mutual_information(&global, &global, opts.bins)?,
        compressed_mi: mutual_information(&global, &compressed, opts.bins)?,
        channel_pruned_mi: mutual_information(&global, &ch_pruned, opts.bins)?,
        filter_pruned_mi: mutual_information(&global, &fl_pruned, opts.bins)?,
        global_accuracy: evaluate(&spec, &global, &splits.server_test)?.accuracy,
        compressed_accuracy: evaluate(&plan.sub_spec, &compressed, &splits.server_test)?.accuracy,
        channel_pruned_accuracy: evaluate(&ch_spec, &ch_pruned, &splits.server_test)?.accuracy,
        filter_pruned_accuracy: evaluate(&fl_spec, &fl_pruned, &splits.server_test)?.accuracy,
    })
}
