//! Transposed-convolutional dilation: rescale heterogeneous client models
//! back to the global size with per-client trainable TC pipelines, fine-tuned
//! on server data with the client model frozen.

use crate::compress::{
    CompressionPlan, FinetuneOptions, PRE_CHANNELS,
};
use crate::error::{Error, Result};
use crate::model::{forward_vars, LayerKind, LayerVars, ParameterSet};
use crate::rng::rng_from;
use crate::tensor::{GradientMap, Graph, Tensor, Var};
use rand::seq::SliceRandom;

/// Per-layer transposed-convolution configurations, mirroring a
/// [`CompressionPlan`] config for config.
#[derive(Clone, Debug)]
pub struct TCPlan {
    pub sr: f64,
    pub layers: Vec<TCLayerConfig>,
    pub sub_spec: crate::model::ModelSpec,
    pub global_spec: crate::model::ModelSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TCLayerConfig {
    pub layer_name: String,
    pub slice_count: usize,
    /// Sub-model slice dims (the TC input).
    pub slice_in: (usize, usize),
    /// Global slice dims (the TC output).
    pub slice_out: (usize, usize),
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    /// Bias dilation `(len_in, len_out, kernel)`.
    pub bias: Option<(usize, usize, usize)>,
}

/// Mirror a compression plan: same kernel, stride, and padding per layer,
/// applied in the transposed direction.
pub fn derive_tc_plan(plan: &CompressionPlan) -> TCPlan {
    let layers = plan
        .layers
        .iter()
        .map(|c| TCLayerConfig {
            layer_name: c.layer_name.clone(),
            slice_count: c.slice_count,
            slice_in: c.slice_out,
            slice_out: c.slice_in,
            kernel: c.kernel,
            stride: c.stride,
            padding: c.padding,
            bias: c.bias.map(|(li, lo, k)| (lo, li, k)),
        })
        .collect();
    TCPlan {
        sr: plan.sr,
        layers,
        sub_spec: plan.sub_spec.clone(),
        global_spec: plan.global_spec.clone(),
    }
}

/// Trainable parameters of one client's dilation pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct TCLayerParams {
    pub pre1_weight: Tensor,
    pub pre1_bias: Tensor,
    pub pre2_weight: Tensor,
    pub pre2_bias: Tensor,
    /// One plain kernel per slice (no weight-norm on the TC side).
    pub kernels: Vec<Tensor>,
    pub bias_kernel: Option<Tensor>,
}

/// One instance per client: dilation parameters are never shared.
#[derive(Clone, Debug, PartialEq)]
pub struct TCParams {
    pub layers: Vec<TCLayerParams>,
}

impl TCParams {
    /// Mirror of the compression initialization: zero pre-layers (residual
    /// identity start) and uniform `±1/sqrt(k1*k2)` dilation kernels.
    pub fn init(plan: &TCPlan, seed: u64) -> Self {
        let mut rng = rng_from(seed, "tc-params");
        let layers = plan
            .layers
            .iter()
            .map(|cfg| {
                let fan = (cfg.kernel.0 * cfg.kernel.1) as f64;
                let bound = 1.0 / fan.sqrt();
                TCLayerParams {
                    // TC kernels stay in convolution layout [c_out, c_in, 1, 1]:
                    // a 1 -> 16 transposed conv uses a (1,16,1,1) kernel.
                    pre1_weight: Tensor::zeros(&[1, PRE_CHANNELS, 1, 1]),
                    pre1_bias: Tensor::zeros(&[PRE_CHANNELS]),
                    pre2_weight: Tensor::zeros(&[PRE_CHANNELS, 1, 1, 1]),
                    pre2_bias: Tensor::zeros(&[1]),
                    kernels: (0..cfg.slice_count)
                        .map(|_| {
                            Tensor::rand_uniform(
                                &[1, 1, cfg.kernel.0, cfg.kernel.1],
                                -bound,
                                bound,
                                &mut rng,
                            )
                        })
                        .collect(),
                    bias_kernel: cfg.bias.map(|(_, _, kb)| {
                        Tensor::rand_uniform(&[1, 1, kb, 1], -1.0 / (kb as f64).sqrt(), 1.0 / (kb as f64).sqrt(), &mut rng)
                    }),
                }
            })
            .collect();
        TCParams { layers }
    }

    /// Exact identity pipeline; valid only for 1x1 kernels (shrinkage 1).
    pub fn identity(plan: &TCPlan) -> Result<Self> {
        let layers = plan
            .layers
            .iter()
            .map(|cfg| {
                if cfg.kernel != (1, 1) || cfg.stride != 1 || cfg.padding != 0 {
                    return Err(Error::Config(format!(
                        "identity TC params need 1x1 kernels, layer {} has {:?}",
                        cfg.layer_name, cfg.kernel
                    )));
                }
                Ok(TCLayerParams {
                    pre1_weight: Tensor::zeros(&[1, PRE_CHANNELS, 1, 1]),
                    pre1_bias: Tensor::zeros(&[PRE_CHANNELS]),
                    pre2_weight: Tensor::zeros(&[PRE_CHANNELS, 1, 1, 1]),
                    pre2_bias: Tensor::zeros(&[1]),
                    kernels: (0..cfg.slice_count)
                        .map(|_| Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap())
                        .collect(),
                    bias_kernel: cfg
                        .bias
                        .map(|_| Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap()),
                })
            })
            .collect::<Result<_>>()?;
        Ok(TCParams { layers })
    }
}

struct TcLayerVars {
    pre1_weight: Var,
    pre1_bias: Var,
    pre2_weight: Var,
    pre2_bias: Var,
    kernels: Vec<Var>,
    bias_kernel: Option<Var>,
}

struct TcVars {
    layers: Vec<TcLayerVars>,
}

fn install_tc_params(g: &mut Graph, tp: &TCParams, trainable: bool) -> TcVars {
    let mut leaf = |t: &Tensor| {
        if trainable {
            g.leaf(t.clone().with_grad())
        } else {
            g.constant(t.clone())
        }
    };
    let layers = tp
        .layers
        .iter()
        .map(|l| TcLayerVars {
            pre1_weight: leaf(&l.pre1_weight),
            pre1_bias: leaf(&l.pre1_bias),
            pre2_weight: leaf(&l.pre2_weight),
            pre2_bias: leaf(&l.pre2_bias),
            kernels: l.kernels.iter().map(&mut leaf).collect(),
            bias_kernel: l.bias_kernel.as_ref().map(&mut leaf),
        })
        .collect();
    TcVars { layers }
}

struct ClientSlices {
    weight_stacks: Vec<Tensor>,
    bias_slices: Vec<Option<Tensor>>,
}

fn slice_client(client: &ParameterSet, plan: &TCPlan) -> Result<ClientSlices> {
    client.validate(&plan.sub_spec)?;
    let mut weight_stacks = Vec::new();
    let mut bias_slices = Vec::new();
    for lp in &client.layers {
        let slices = crate::compress::reshape_for_compression(&lp.weight)?;
        let (o, i) = (slices[0].shape()[2], slices[0].shape()[3]);
        let mut data = Vec::with_capacity(slices.len() * o * i);
        for s in &slices {
            data.extend_from_slice(s.data());
        }
        weight_stacks.push(Tensor::new(vec![slices.len(), 1, o, i], data)?);
        bias_slices.push(match &lp.bias {
            Some(b) => Some(b.reshape(&[1, 1, b.len(), 1])?),
            None => None,
        });
    }
    Ok(ClientSlices {
        weight_stacks,
        bias_slices,
    })
}

/// Build the dilation pipeline on a graph: two TC 1x1 layers with a residual
/// connection, per-slice transposed convolutions, and MLR on the weights.
fn build_dilate_graph(
    g: &mut Graph,
    plan: &TCPlan,
    slices: &ClientSlices,
    vars: &TcVars,
    s_p: f64,
    s_n: f64,
) -> Result<Vec<LayerVars>> {
    let mut out = Vec::with_capacity(plan.layers.len());
    for (i, cfg) in plan.layers.iter().enumerate() {
        let lv = &vars.layers[i];
        let x = g.constant(slices.weight_stacks[i].clone());
        let h = g.transposed_conv2d(x, lv.pre1_weight, 1, 0)?;
        let h = g.add_bias(h, lv.pre1_bias)?;
        let h = g.transposed_conv2d(h, lv.pre2_weight, 1, 0)?;
        let h = g.add_bias(h, lv.pre2_bias)?;
        let y = g.add(h, x)?;
        let mut zs = Vec::with_capacity(cfg.slice_count);
        for s in 0..cfg.slice_count {
            let xs = g.narrow0(y, s, 1)?;
            zs.push(g.transposed_conv2d(xs, lv.kernels[s], cfg.stride, cfg.padding)?);
        }
        let z = g.concat0(&zs)?;
        let w = g.mlr(z, s_p, s_n);

        let global_layer = &plan.global_spec.layers[i];
        let weight = match global_layer.kind {
            LayerKind::Conv2d => {
                let (k1, k2) = global_layer.kernel.unwrap();
                g.slices_to_conv_weight(w, k1, k2)?
            }
            LayerKind::Dense => g.reshape(w, &[cfg.slice_out.0, cfg.slice_out.1])?,
        };

        let bias = match (&slices.bias_slices[i], lv.bias_kernel, cfg.bias) {
            (Some(bslice), Some(bk), Some((_, len_out, _))) => {
                let xb = g.constant(bslice.clone());
                let hb = g.transposed_conv2d(xb, lv.pre1_weight, 1, 0)?;
                let hb = g.add_bias(hb, lv.pre1_bias)?;
                let hb = g.transposed_conv2d(hb, lv.pre2_weight, 1, 0)?;
                let hb = g.add_bias(hb, lv.pre2_bias)?;
                let yb = g.add(hb, xb)?;
                let zb = g.transposed_conv2d(yb, bk, 1, 0)?;
                Some(g.reshape(zb, &[len_out])?)
            }
            (None, None, None) => None,
            _ => {
                return Err(Error::Config(format!(
                    "bias configuration mismatch in layer {}",
                    cfg.layer_name
                )))
            }
        };
        out.push(LayerVars { weight, bias });
    }
    Ok(out)
}

/// Dilate a client model to the global size.
pub fn dilate_model(
    client: &ParameterSet,
    plan: &TCPlan,
    tp: &TCParams,
    s_p: f64,
    s_n: f64,
) -> Result<ParameterSet> {
    if tp.layers.len() != plan.layers.len() {
        return Err(Error::Config(format!(
            "{} TC-param layers for a {}-layer plan",
            tp.layers.len(),
            plan.layers.len()
        )));
    }
    let slices = slice_client(client, plan)?;
    let mut g = Graph::new();
    let vars = install_tc_params(&mut g, tp, false);
    let layer_vars = build_dilate_graph(&mut g, plan, &slices, &vars, s_p, s_n)?;
    let layers = layer_vars
        .iter()
        .zip(&plan.global_spec.layers)
        .map(|(lv, spec)| crate::model::LayerParams {
            name: spec.name.clone(),
            weight: g.value(lv.weight).clone(),
            bias: lv.bias.map(|b| g.value(b).clone()),
        })
        .collect();
    let params = ParameterSet { layers };
    params.validate(&plan.global_spec)?;
    Ok(params)
}

impl TCParams {
    fn apply_step(&mut self, vars: &TcVars, grads: &GradientMap, lr: f64) {
        let upd = |t: &mut Tensor, v: Var| {
            if let Some(g) = grads.get(v) {
                for (p, gv) in t.data_mut().iter_mut().zip(g.data()) {
                    *p -= lr * gv;
                }
            }
        };
        for (l, lv) in self.layers.iter_mut().zip(&vars.layers) {
            upd(&mut l.pre1_weight, lv.pre1_weight);
            upd(&mut l.pre1_bias, lv.pre1_bias);
            upd(&mut l.pre2_weight, lv.pre2_weight);
            upd(&mut l.pre2_bias, lv.pre2_bias);
            for (k, &kv) in l.kernels.iter_mut().zip(&lv.kernels) {
                upd(k, kv);
            }
            if let (Some(bk), Some(bv)) = (&mut l.bias_kernel, lv.bias_kernel) {
                upd(bk, bv);
            }
        }
    }
}

/// Fine-tune one client's TC parameters on server data; the client model is
/// frozen. Deterministic in the seed.
pub fn finetune_dilation(
    client: &ParameterSet,
    plan: &TCPlan,
    tp: &TCParams,
    server_data: &crate::data::Dataset,
    opts: &FinetuneOptions,
) -> Result<TCParams> {
    if server_data.is_empty() {
        return Err(Error::Usage("finetune_dilation on empty server data".into()));
    }
    let slices = slice_client(client, plan)?;
    let mut current = tp.clone();
    let mut indices: Vec<usize> = (0..server_data.len()).collect();
    for epoch in 0..opts.epochs {
        let lr = opts.schedule.lr_at(epoch)?;
        let mut rng = rng_from(opts.seed, &format!("tc-finetune-epoch{epoch}"));
        indices.shuffle(&mut rng);
        for chunk in indices.chunks(opts.batch_size.max(1)) {
            let (batch, labels) = server_data.gather(chunk);
            let mut g = Graph::new();
            let vars = install_tc_params(&mut g, &current, true);
            let layer_vars = build_dilate_graph(&mut g, plan, &slices, &vars, opts.s_p, opts.s_n)?;
            let x = g.constant(batch);
            let logits = forward_vars(&mut g, &plan.global_spec, &layer_vars, x)?;
            let loss = g.cross_entropy(logits, &labels)?;
            let grads = g.backward(loss)?;
            current.apply_step(&vars, &grads, lr);
        }
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compress::{
        compress_model, derive_plan, ConvParams, KernelPolicy,
    };
    use crate::model::{LayerDesc, ModelSpec};

    fn paper_toy_spec() -> ModelSpec {
        ModelSpec::build(
            &[1, 12, 12],
            &[
                LayerDesc::conv("conv1", 16, (3, 3)),
                LayerDesc::conv("conv2", 32, (3, 3)),
                LayerDesc::dense("fc", 10),
            ],
            10,
        )
        .unwrap()
    }

    #[test]
    fn tc_plan_mirrors_compression_plan() {
        let spec = paper_toy_spec();
        let plan = derive_plan(&spec, 0.75, KernelPolicy::Auto).unwrap();
        let tc = derive_tc_plan(&plan);
        let cfg = &tc.layers[1];
        assert_eq!(cfg.kernel, (9, 5));
        assert_eq!(cfg.slice_in, (24, 12));
        assert_eq!(cfg.slice_out, (32, 16));
        // composing the shape maps is the identity on every layer
        for (c, t) in plan.layers.iter().zip(&tc.layers) {
            assert_eq!(c.slice_in, t.slice_out);
            assert_eq!(c.slice_out, t.slice_in);
            assert_eq!((c.kernel, c.stride, c.padding), (t.kernel, t.stride, t.padding));
        }
        let identity = derive_tc_plan(&derive_plan(&spec, 1.0, KernelPolicy::Auto).unwrap());
        assert!(identity.layers.iter().all(|c| c.kernel == (1, 1)));
    }

    #[test]
    fn dilated_shapes_match_global_spec() {
        let spec = paper_toy_spec();
        let plan = derive_plan(&spec, 0.75, KernelPolicy::Auto).unwrap();
        let tc = derive_tc_plan(&plan);
        let global = ParameterSet::init(&spec, 3);
        let cp = ConvParams::init(&plan, 4);
        let sub = compress_model(&global, &plan, &cp, 0.85, 0.001).unwrap();
        let tp = TCParams::init(&tc, 5);
        let dilated = dilate_model(&sub, &tc, &tp, 0.85, 0.001).unwrap();
        dilated.validate(&spec).unwrap();
        assert_eq!(dilated.layers[1].weight.shape(), &[32, 16, 3, 3]);
    }

    #[test]
    fn identity_pipeline_preserves_client_params() {
        let spec = paper_toy_spec();
        let plan = derive_plan(&spec, 1.0, KernelPolicy::Auto).unwrap();
        let tc = derive_tc_plan(&plan);
        let client = ParameterSet::init(&spec, 9);
        let tp = TCParams::identity(&tc).unwrap();
        let dilated = dilate_model(&client, &tc, &tp, 1.0, 1.0).unwrap();
        assert_eq!(dilated, client);
        // identity params are rejected for genuinely shrinking plans
        let plan_half = derive_plan(&spec, 0.5, KernelPolicy::Auto).unwrap();
        assert!(TCParams::identity(&derive_tc_plan(&plan_half)).is_err());
    }

    #[test]
    fn finetune_zero_epochs_keeps_params_and_client_frozen() {
        let spec = paper_toy_spec();
        let plan = derive_plan(&spec, 0.5, KernelPolicy::Auto).unwrap();
        let tc = derive_tc_plan(&plan);
        let client = ParameterSet::init(&plan.sub_spec, 1);
        let client_before = client.clone();
        let tp = TCParams::init(&tc, 2);
        let data = crate::data::gen_synthetic(10, 4, &[1, 12, 12], 6.0, 3).unwrap();
        let mut opts = FinetuneOptions::defaults(7);
        opts.epochs = 0;
        let tp2 = finetune_dilation(&client, &tc, &tp, &data, &opts).unwrap();
        assert_eq!(tp2, tp);
        assert_eq!(client, client_before);
    }

    #[test]
    fn finetune_reduces_dilated_model_loss() {
        let spec = ModelSpec::build(
            &[1, 6, 6],
            &[LayerDesc::conv("conv1", 4, (3, 3)), LayerDesc::dense("fc", 4)],
            4,
        )
        .unwrap();
        let data = crate::data::gen_synthetic(4, 50, &[1, 6, 6], 5.0, 7).unwrap();
        let plan = derive_plan(&spec, 0.5, KernelPolicy::Auto).unwrap();
        let tc = derive_tc_plan(&plan);
        // client model: trained directly at the sub-model size
        let client = crate::model::local_train(
            &plan.sub_spec,
            &ParameterSet::init(&plan.sub_spec, 1),
            &data,
            &crate::model::TrainOptions::new(3, 0.05, 2),
        )
        .unwrap();
        let tp = TCParams::init(&tc, 5);
        let opts = FinetuneOptions::defaults(9);

        let d0 = dilate_model(&client, &tc, &tp, opts.s_p, opts.s_n).unwrap();
        let loss0 = crate::model::evaluate(&spec, &d0, &data).unwrap().loss;
        let tuned = finetune_dilation(&client, &tc, &tp, &data, &opts).unwrap();
        let d1 = dilate_model(&client, &tc, &tuned, opts.s_p, opts.s_n).unwrap();
        let loss1 = crate::model::evaluate(&spec, &d1, &data).unwrap().loss;
        assert!(loss1 < loss0, "dilation fine-tuning did not help: {loss0} -> {loss1}");
    }

    #[test]
    fn clients_trained_on_disjoint_labels_dilate_differently() {
        let spec = ModelSpec::build(
            &[1, 6, 6],
            &[LayerDesc::conv("conv1", 4, (3, 3)), LayerDesc::dense("fc", 4)],
            4,
        )
        .unwrap();
        let plan = derive_plan(&spec, 0.5, KernelPolicy::Auto).unwrap();
        let tc = derive_tc_plan(&plan);
        let data = crate::data::gen_synthetic(4, 40, &[1, 6, 6], 5.0, 7).unwrap();
        let low: Vec<usize> = (0..data.len()).filter(|&i| data.labels()[i] < 2).collect();
        let high: Vec<usize> = (0..data.len()).filter(|&i| data.labels()[i] >= 2).collect();
        let start = ParameterSet::init(&plan.sub_spec, 1);
        let opts = crate::model::TrainOptions::new(2, 0.05, 3);
        let a = crate::model::local_train(&plan.sub_spec, &start, &data.subset(&low).unwrap(), &opts)
            .unwrap();
        let b =
            crate::model::local_train(&plan.sub_spec, &start, &data.subset(&high).unwrap(), &opts)
                .unwrap();
        let tp = TCParams::init(&tc, 5);
        let da = dilate_model(&a, &tc, &tp, 0.85, 0.001).unwrap();
        let db = dilate_model(&b, &tc, &tp, 0.85, 0.001).unwrap();
        assert!(da.l2_distance(&db).unwrap() > 0.0);
    }
}
