//! Convolutional compression: derive per-layer compression configurations
//! from a shrinkage ratio, run the compression pipeline (two 1x1 convs with a
//! residual connection, per-slice compression convolutions under weight
//! normalization, modified Leaky ReLU), and fine-tune the convolution
//! parameters on server data with the global model frozen.

mod schedule;

pub use schedule::{cosine_lr, LrSchedule};

use crate::error::{Error, Result};
use crate::model::{forward_vars, LayerKind, LayerVars, ModelSpec, ParameterSet};
use crate::rng::rng_from;
use crate::tensor::{GradientMap, Graph, Tensor, Var};
use rand::seq::SliceRandom;

/// Output channel count of the first 1x1 pre-convolution.
pub const PRE_CHANNELS: usize = 16;

/// How compression kernel shapes are chosen for each axis map `d_in -> d_out`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum KernelPolicy {
    /// stride 1, padding 0, kernel `d_in - d_out + 1` (the default setting).
    Auto,
    /// Fixed kernel size and stride; the (symmetric) padding is solved per
    /// layer from the shape law. Layers where no single padding satisfies
    /// both axes (for instance any layer with one preserved axis) fall back
    /// to `Auto`.
    Fixed { k: usize, stride: usize },
}

/// Configuration of the compression convolutions for one model layer.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressionLayerConfig {
    pub layer_name: String,
    /// Number of weight slices: `k1*k2` of the layer kernel, 1 for dense.
    pub slice_count: usize,
    /// Global slice spatial dims `(out_channels, in_channels)`.
    pub slice_in: (usize, usize),
    /// Sub-model slice spatial dims.
    pub slice_out: (usize, usize),
    /// Compression kernel shape.
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    /// Bias compression: `(len_in, len_out, kernel)`, stride 1, padding 0.
    pub bias: Option<(usize, usize, usize)>,
}

impl CompressionLayerConfig {
    /// Verify the conv shape law `(d_in + 2p - k)/s + 1 == d_out` on both axes.
    pub fn shape_law_holds(&self) -> bool {
        let check = |d_in: usize, k: usize, d_out: usize| {
            crate::tensor::conv_out_dim(d_in, k, self.stride, self.padding)
                .map(|o| o == d_out)
                .unwrap_or(false)
                && (d_in + 2 * self.padding - k) % self.stride == 0
        };
        check(self.slice_in.0, self.kernel.0, self.slice_out.0)
            && check(self.slice_in.1, self.kernel.1, self.slice_out.1)
    }
}

/// Per-layer compression configurations derived from a shrinkage ratio,
/// together with the sub-model architecture they produce.
#[derive(Clone, Debug)]
pub struct CompressionPlan {
    pub sr: f64,
    pub layers: Vec<CompressionLayerConfig>,
    pub sub_spec: ModelSpec,
    pub global_spec: ModelSpec,
}

/// Solve the padding of `(d_in + 2p - k)/s + 1 == d_out` for a fixed kernel.
fn solve_padding(d_in: usize, d_out: usize, k: usize, stride: usize) -> Result<usize> {
    let need = (d_out - 1) * stride + k;
    if need < d_in {
        return Err(Error::Config(format!(
            "kernel {k} stride {stride} cannot map {d_in} -> {d_out} (padding would be negative)"
        )));
    }
    let twice = need - d_in;
    if twice % 2 != 0 {
        return Err(Error::Config(format!(
            "kernel {k} stride {stride} cannot map {d_in} -> {d_out} with symmetric padding"
        )));
    }
    Ok(twice / 2)
}

/// Round a channel count by the shrinkage ratio, clamped to at least 1.
pub fn shrink_channels(c: usize, sr: f64) -> usize {
    ((c as f64 * sr).round() as usize).max(1)
}

/// Derive the compression plan for every layer of `global_spec` at shrinkage
/// ratio `sr`. Channel counts map to `round(sr * c)` (min 1); the first
/// layer's input axis and the last layer's output axis are left uncompressed.
pub fn derive_plan(global_spec: &ModelSpec, sr: f64, policy: KernelPolicy) -> Result<CompressionPlan> {
    if !(sr > 0.0 && sr <= 1.0) {
        return Err(Error::Config(format!("shrinkage ratio {sr} outside (0, 1]")));
    }
    let n_layers = global_spec.layers.len();
    let descs: Vec<crate::model::LayerDesc> = global_spec
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| crate::model::LayerDesc {
            name: l.name.clone(),
            kind: l.kind,
            out_channels: if i + 1 == n_layers {
                l.out_channels
            } else {
                shrink_channels(l.out_channels, sr)
            },
            kernel: l.kernel,
            activation: l.activation,
            has_bias: l.has_bias,
        })
        .collect();
    let sub_spec = ModelSpec::build(&global_spec.input_shape, &descs, global_spec.num_classes)?;

    let mut layers = Vec::with_capacity(n_layers);
    for (g, s) in global_spec.layers.iter().zip(&sub_spec.layers) {
        let (slice_in, slice_out, slice_count) = match g.kind {
            LayerKind::Conv2d => {
                let (k1, k2) = g.kernel.unwrap();
                (
                    (g.out_channels, g.in_channels),
                    (s.out_channels, s.in_channels),
                    k1 * k2,
                )
            }
            LayerKind::Dense => (
                (g.out_channels, g.in_channels),
                (s.out_channels, s.in_channels),
                1,
            ),
        };
        let auto = (
            (
                slice_in.0 - slice_out.0 + 1,
                slice_in.1 - slice_out.1 + 1,
            ),
            1,
            0,
        );
        let (kernel, stride, padding) = match policy {
            KernelPolicy::Auto => auto,
            KernelPolicy::Fixed { k, stride } => {
                match (
                    solve_padding(slice_in.0, slice_out.0, k, stride),
                    solve_padding(slice_in.1, slice_out.1, k, stride),
                ) {
                    (Ok(p0), Ok(p1)) if p0 == p1 && slice_in.0 + 2 * p0 >= k && slice_in.1 + 2 * p0 >= k => {
                        ((k, k), stride, p0)
                    }
                    _ => auto,
                }
            }
        };
        let bias = g
            .has_bias
            .then(|| (g.out_channels, s.out_channels, g.out_channels - s.out_channels + 1));
        let cfg = CompressionLayerConfig {
            layer_name: g.name.clone(),
            slice_count,
            slice_in,
            slice_out,
            kernel,
            stride,
            padding,
            bias,
        };
        if !cfg.shape_law_holds() {
            return Err(Error::Config(format!(
                "layer {}: derived config violates the conv shape law: {cfg:?}",
                g.name
            )));
        }
        layers.push(cfg);
    }
    Ok(CompressionPlan {
        sr,
        layers,
        sub_spec,
        global_spec: global_spec.clone(),
    })
}

/// Reshape a weight tensor into 2-D slices, one per kernel position.
///
/// A conv weight `(O,I,k1,k2)` yields `k1*k2` slices of shape `(1,1,O,I)`
/// where slice `a*k2 + b` holds `W[.,.,a,b]`; a dense weight `(O,I)` yields
/// one slice.
pub fn reshape_for_compression(weight: &Tensor) -> Result<Vec<Tensor>> {
    match weight.rank() {
        4 => {
            let s = weight.shape();
            let (o, i, k1, k2) = (s[0], s[1], s[2], s[3]);
            let mut slices = Vec::with_capacity(k1 * k2);
            for a in 0..k1 {
                for b in 0..k2 {
                    let mut data = Vec::with_capacity(o * i);
                    for oo in 0..o {
                        for ii in 0..i {
                            data.push(weight.data()[((oo * i + ii) * k1 + a) * k2 + b]);
                        }
                    }
                    slices.push(Tensor::new(vec![1, 1, o, i], data)?);
                }
            }
            Ok(slices)
        }
        2 => {
            let s = weight.shape();
            Ok(vec![weight.reshape(&[1, 1, s[0], s[1]])?])
        }
        r => Err(Error::Config(format!(
            "cannot reshape rank-{r} weight for compression"
        ))),
    }
}

/// Inverse of [`reshape_for_compression`]: rebuild the weight from slices.
pub fn assemble_from_slices(slices: &[Tensor], shape: &[usize]) -> Result<Tensor> {
    match shape.len() {
        4 => {
            let (o, i, k1, k2) = (shape[0], shape[1], shape[2], shape[3]);
            if slices.len() != k1 * k2 {
                return Err(Error::Config(format!(
                    "{} slices for a {k1}x{k2} kernel",
                    slices.len()
                )));
            }
            let mut data = vec![0.0; o * i * k1 * k2];
            for (s, slice) in slices.iter().enumerate() {
                if slice.shape() != [1, 1, o, i] {
                    return Err(Error::Config(format!(
                        "slice shape {:?}, expected [1,1,{o},{i}]",
                        slice.shape()
                    )));
                }
                let (a, b) = (s / k2, s % k2);
                for oo in 0..o {
                    for ii in 0..i {
                        data[((oo * i + ii) * k1 + a) * k2 + b] = slice.data()[oo * i + ii];
                    }
                }
            }
            Tensor::new(shape.to_vec(), data)
        }
        2 => {
            if slices.len() != 1 {
                return Err(Error::Config("dense weight wants exactly one slice".into()));
            }
            slices[0].reshape(shape)
        }
        r => Err(Error::Config(format!("cannot assemble rank-{r} weight"))),
    }
}

/// Stack slices into one `(S,1,O,I)` batch for the shared 1x1 pre-layers.
fn stack_slices(slices: &[Tensor]) -> Result<Tensor> {
    let (o, i) = (slices[0].shape()[2], slices[0].shape()[3]);
    let mut data = Vec::with_capacity(slices.len() * o * i);
    for s in slices {
        data.extend_from_slice(s.data());
    }
    Tensor::new(vec![slices.len(), 1, o, i], data)
}

/// A compression kernel under weight-norm reparameterization.
#[derive(Clone, Debug, PartialEq)]
pub struct WnKernel {
    pub direction: Tensor,
    pub magnitude: Tensor,
}

impl WnKernel {
    fn init(shape: &[usize], rng: &mut impl rand::Rng) -> Self {
        let fan: usize = shape[2] * shape[3];
        let bound = 1.0 / (fan as f64).sqrt();
        let direction = Tensor::rand_uniform(shape, -bound, bound, rng);
        let magnitude = Tensor::new(vec![1], vec![direction.l2_norm()]).unwrap();
        WnKernel { direction, magnitude }
    }

    fn identity() -> Self {
        WnKernel {
            direction: Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap(),
            magnitude: Tensor::new(vec![1], vec![1.0]).unwrap(),
        }
    }
}

/// Trainable parameters of the compression pipeline for one model layer:
/// the two 1x1 pre-convolutions and one kernel per slice.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayerParams {
    pub pre1_weight: Tensor,
    pub pre1_bias: Tensor,
    pub pre2_weight: Tensor,
    pub pre2_bias: Tensor,
    pub kernels: Vec<WnKernel>,
    pub bias_kernel: Option<WnKernel>,
}

/// Convolution parameters for a whole plan, one entry per model layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub layers: Vec<ConvLayerParams>,
}

impl ConvParams {
    /// Zero pre-layers (so the pipeline starts at the residual identity) and
    /// uniform `±1/sqrt(k1*k2)` compression kernels with weight-norm
    /// magnitudes equal to the sampled direction norms.
    pub fn init(plan: &CompressionPlan, seed: u64) -> Self {
        let mut rng = rng_from(seed, "conv-params");
        let layers = plan
            .layers
            .iter()
            .map(|cfg| ConvLayerParams {
                pre1_weight: Tensor::zeros(&[PRE_CHANNELS, 1, 1, 1]),
                pre1_bias: Tensor::zeros(&[PRE_CHANNELS]),
                pre2_weight: Tensor::zeros(&[1, PRE_CHANNELS, 1, 1]),
                pre2_bias: Tensor::zeros(&[1]),
                kernels: (0..cfg.slice_count)
                    .map(|_| WnKernel::init(&[1, 1, cfg.kernel.0, cfg.kernel.1], &mut rng))
                    .collect(),
                bias_kernel: cfg
                    .bias
                    .map(|(_, _, kb)| WnKernel::init(&[1, 1, kb, 1], &mut rng)),
            })
            .collect();
        ConvParams { layers }
    }

    /// Exact identity pipeline. Only valid when every kernel is 1x1
    /// (shrinkage ratio 1 under the default policy).
    pub fn identity(plan: &CompressionPlan) -> Result<Self> {
        let layers = plan
            .layers
            .iter()
            .map(|cfg| {
                if cfg.kernel != (1, 1) || cfg.stride != 1 || cfg.padding != 0 {
                    return Err(Error::Config(format!(
                        "identity conv params need 1x1 kernels, layer {} has {:?}",
                        cfg.layer_name, cfg.kernel
                    )));
                }
                if let Some((li, lo, kb)) = cfg.bias {
                    if li != lo || kb != 1 {
                        return Err(Error::Config(format!(
                            "identity conv params need untouched biases in layer {}",
                            cfg.layer_name
                        )));
                    }
                }
                Ok(ConvLayerParams {
                    pre1_weight: Tensor::zeros(&[PRE_CHANNELS, 1, 1, 1]),
                    pre1_bias: Tensor::zeros(&[PRE_CHANNELS]),
                    pre2_weight: Tensor::zeros(&[1, PRE_CHANNELS, 1, 1]),
                    pre2_bias: Tensor::zeros(&[1]),
                    kernels: (0..cfg.slice_count).map(|_| WnKernel::identity()).collect(),
                    bias_kernel: cfg.bias.map(|_| WnKernel::identity()),
                })
            })
            .collect::<Result<_>>()?;
        Ok(ConvParams { layers })
    }

    /// Flat named view for checkpointing under the `FCCV` magic.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.pre1.weight"), &l.pre1_weight));
            out.push((format!("layer{i}.pre1.bias"), &l.pre1_bias));
            out.push((format!("layer{i}.pre2.weight"), &l.pre2_weight));
            out.push((format!("layer{i}.pre2.bias"), &l.pre2_bias));
            for (s, k) in l.kernels.iter().enumerate() {
                out.push((format!("layer{i}.kernel{s}.direction"), &k.direction));
                out.push((format!("layer{i}.kernel{s}.magnitude"), &k.magnitude));
            }
            if let Some(bk) = &l.bias_kernel {
                out.push((format!("layer{i}.bias_kernel.direction"), &bk.direction));
                out.push((format!("layer{i}.bias_kernel.magnitude"), &bk.magnitude));
            }
        }
        out
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::model::write_named_tensors(
            path,
            crate::model::MAGIC_CONV_PARAMS,
            &self.named_tensors(),
        )
    }

    pub fn load(path: &std::path::Path, plan: &CompressionPlan) -> Result<Self> {
        let entries = crate::model::read_named_tensors(path, crate::model::MAGIC_CONV_PARAMS)?;
        let find = |name: &str| -> Result<Tensor> {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
        };
        let mut layers = Vec::new();
        for (i, cfg) in plan.layers.iter().enumerate() {
            let kernels = (0..cfg.slice_count)
                .map(|s| {
                    Ok(WnKernel {
                        direction: find(&format!("layer{i}.kernel{s}.direction"))?,
                        magnitude: find(&format!("layer{i}.kernel{s}.magnitude"))?,
                    })
                })
                .collect::<Result<_>>()?;
            let bias_kernel = match cfg.bias {
                Some(_) => Some(WnKernel {
                    direction: find(&format!("layer{i}.bias_kernel.direction"))?,
                    magnitude: find(&format!("layer{i}.bias_kernel.magnitude"))?,
                }),
                None => None,
            };
            layers.push(ConvLayerParams {
                pre1_weight: find(&format!("layer{i}.pre1.weight"))?,
                pre1_bias: find(&format!("layer{i}.pre1.bias"))?,
                pre2_weight: find(&format!("layer{i}.pre2.weight"))?,
                pre2_bias: find(&format!("layer{i}.pre2.bias"))?,
                kernels,
                bias_kernel,
            });
        }
        Ok(ConvParams { layers })
    }
}

/// Feature switches for the compression pipeline, used by the ablation study.
#[derive(Clone, Copy, Debug)]
pub struct PipelineFeatures {
    /// Two 1x1 convolutions plus residual connection before compression.
    pub pre_residual: bool,
    /// Modified Leaky ReLU on compressed weights.
    pub mlr: bool,
    /// Weight-norm reparameterization of the compression kernels.
    pub weight_norm: bool,
}

impl Default for PipelineFeatures {
    fn default() -> Self {
        PipelineFeatures {
            pre_residual: true,
            mlr: true,
            weight_norm: true,
        }
    }
}

impl PipelineFeatures {
    pub fn bare() -> Self {
        PipelineFeatures {
            pre_residual: false,
            mlr: false,
            weight_norm: false,
        }
    }
}

/// Graph handles for one layer's trainable compression parameters.
pub(crate) struct CpLayerVars {
    pre1_weight: Var,
    pre1_bias: Var,
    pre2_weight: Var,
    pre2_bias: Var,
    kernels: Vec<(Var, Var)>,
    bias_kernel: Option<(Var, Var)>,
}

pub(crate) struct CpVars {
    pub layers: Vec<CpLayerVars>,
}

pub(crate) fn install_conv_params(g: &mut Graph, cp: &ConvParams, trainable: bool) -> CpVars {
    let mut leaf = |t: &Tensor| {
        if trainable {
            g.leaf(t.clone().with_grad())
        } else {
            g.constant(t.clone())
        }
    };
    let layers = cp
        .layers
        .iter()
        .map(|l| CpLayerVars {
            pre1_weight: leaf(&l.pre1_weight),
            pre1_bias: leaf(&l.pre1_bias),
            pre2_weight: leaf(&l.pre2_weight),
            pre2_bias: leaf(&l.pre2_bias),
            kernels: l
                .kernels
                .iter()
                .map(|k| (leaf(&k.direction), leaf(&k.magnitude)))
                .collect(),
            bias_kernel: l
                .bias_kernel
                .as_ref()
                .map(|k| (leaf(&k.direction), leaf(&k.magnitude))),
        })
        .collect();
    CpVars { layers }
}

/// Constant global-parameter slices fed into the pipeline.
pub(crate) struct GlobalSlices {
    /// `(S,1,O,I)` stack per layer.
    pub weight_stacks: Vec<Tensor>,
    /// `(1,1,d,1)` bias slice per layer, when present.
    pub bias_slices: Vec<Option<Tensor>>,
}

pub(crate) fn slice_global(global: &ParameterSet, plan: &CompressionPlan) -> Result<GlobalSlices> {
    global.validate(&plan.global_spec)?;
    let mut weight_stacks = Vec::new();
    let mut bias_slices = Vec::new();
    for lp in &global.layers {
        let slices = reshape_for_compression(&lp.weight)?;
        weight_stacks.push(stack_slices(&slices)?);
        bias_slices.push(match &lp.bias {
            Some(b) => Some(b.reshape(&[1, 1, b.len(), 1])?),
            None => None,
        });
    }
    Ok(GlobalSlices {
        weight_stacks,
        bias_slices,
    })
}

/// Run the shared 1x1 pre-convolutions plus residual on a slice stack.
fn pre_residual(g: &mut Graph, x: Var, lv: &CpLayerVars) -> Result<Var> {
    let h = g.conv2d(x, lv.pre1_weight, 1, 0)?;
    let h = g.add_bias(h, lv.pre1_bias)?;
    let h = g.conv2d(h, lv.pre2_weight, 1, 0)?;
    let h = g.add_bias(h, lv.pre2_bias)?;
    g.add(h, x)
}

/// Build the compression pipeline on a graph and return the sub-model's
/// layer variables, ready for [`forward_vars`].
pub(crate) fn build_compress_graph(
    g: &mut Graph,
    plan: &CompressionPlan,
    slices: &GlobalSlices,
    vars: &CpVars,
    feats: &PipelineFeatures,
    s_p: f64,
    s_n: f64,
) -> Result<Vec<LayerVars>> {
    let mut out = Vec::with_capacity(plan.layers.len());
    for (i, cfg) in plan.layers.iter().enumerate() {
        let lv = &vars.layers[i];
        let x = g.constant(slices.weight_stacks[i].clone());
        let y = if feats.pre_residual {
            pre_residual(g, x, lv)?
        } else {
            x
        };
        let mut zs = Vec::with_capacity(cfg.slice_count);
        for s in 0..cfg.slice_count {
            let xs = g.narrow0(y, s, 1)?;
            let (dir, mag) = lv.kernels[s];
            let k = if feats.weight_norm {
                g.weight_norm(dir, mag)?
            } else {
                dir
            };
            zs.push(g.conv2d(xs, k, cfg.stride, cfg.padding)?);
        }
        let z = g.concat0(&zs)?;
        let w = if feats.mlr { g.mlr(z, s_p, s_n) } else { z };

        let sub_layer = &plan.sub_spec.layers[i];
        let weight = match sub_layer.kind {
            LayerKind::Conv2d => {
                let (k1, k2) = sub_layer.kernel.unwrap();
                g.slices_to_conv_weight(w, k1, k2)?
            }
            LayerKind::Dense => g.reshape(w, &[cfg.slice_out.0, cfg.slice_out.1])?,
        };

        // Biases run through the same pre-layers and their own compression
        // kernel, without MLR: biases are scale-sensitive.
        let bias = match (&slices.bias_slices[i], lv.bias_kernel, cfg.bias) {
            (Some(bslice), Some((bdir, bmag)), Some((_, len_out, _))) => {
                let xb = g.constant(bslice.clone());
                let yb = if feats.pre_residual {
                    pre_residual(g, xb, lv)?
                } else {
                    xb
                };
                let kb = if feats.weight_norm {
                    g.weight_norm(bdir, bmag)?
                } else {
                    bdir
                };
                let zb = g.conv2d(yb, kb, 1, 0)?;
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

/// Run the compression pipeline and materialize the sub-model parameters.
pub fn compress_model(
    global: &ParameterSet,
    plan: &CompressionPlan,
    cp: &ConvParams,
    s_p: f64,
    s_n: f64,
) -> Result<ParameterSet> {
    compress_model_with(global, plan, cp, s_p, s_n, &PipelineFeatures::default())
}

/// [`compress_model`] with explicit pipeline feature switches.
pub fn compress_model_with(
    global: &ParameterSet,
    plan: &CompressionPlan,
    cp: &ConvParams,
    s_p: f64,
    s_n: f64,
    feats: &PipelineFeatures,
) -> Result<ParameterSet> {
    if cp.layers.len() != plan.layers.len() {
        return Err(Error::Config(format!(
            "{} conv-param layers for a {}-layer plan",
            cp.layers.len(),
            plan.layers.len()
        )));
    }
    let slices = slice_global(global, plan)?;
    let mut g = Graph::new();
    let vars = install_conv_params(&mut g, cp, false);
    let layer_vars = build_compress_graph(&mut g, plan, &slices, &vars, feats, s_p, s_n)?;
    let layers = layer_vars
        .iter()
        .zip(&plan.sub_spec.layers)
        .map(|(lv, spec)| crate::model::LayerParams {
            name: spec.name.clone(),
            weight: g.value(lv.weight).clone(),
            bias: lv.bias.map(|b| g.value(b).clone()),
        })
        .collect();
    let params = ParameterSet { layers };
    params.validate(&plan.sub_spec)?;
    Ok(params)
}

/// Knobs for [`finetune_compression`] (and, mirrored, dilation fine-tuning).
#[derive(Clone, Copy, Debug)]
pub struct FinetuneOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub s_p: f64,
    pub s_n: f64,
    pub features: PipelineFeatures,
    pub seed: u64,
}

impl FinetuneOptions {
    /// The evaluation defaults: 20 epochs, batch 32, cosine schedule
    /// (T_max 4, 1e-5..1e-3), MLR slopes 0.85/0.001, full pipeline.
    pub fn defaults(seed: u64) -> Self {
        FinetuneOptions {
            epochs: 20,
            batch_size: 32,
            schedule: LrSchedule::Cosine {
                t_max: 4,
                lr_min: 1e-5,
                lr_max: 1e-3,
            },
            s_p: 0.85,
            s_n: 0.001,
            features: PipelineFeatures::default(),
            seed,
        }
    }
}

fn apply_kernel_grad(t: &mut Tensor, v: Var, grads: &GradientMap, lr: f64) {
    if let Some(g) = grads.get(v) {
        for (p, gv) in t.data_mut().iter_mut().zip(g.data()) {
            *p -= lr * gv;
        }
    }
}

impl ConvParams {
    pub(crate) fn apply_step(&mut self, vars: &CpVars, grads: &GradientMap, lr: f64) {
        for (l, lv) in self.layers.iter_mut().zip(&vars.layers) {
            apply_kernel_grad(&mut l.pre1_weight, lv.pre1_weight, grads, lr);
            apply_kernel_grad(&mut l.pre1_bias, lv.pre1_bias, grads, lr);
            apply_kernel_grad(&mut l.pre2_weight, lv.pre2_weight, grads, lr);
            apply_kernel_grad(&mut l.pre2_bias, lv.pre2_bias, grads, lr);
            for (k, &(dv, mv)) in l.kernels.iter_mut().zip(&lv.kernels) {
                apply_kernel_grad(&mut k.direction, dv, grads, lr);
                apply_kernel_grad(&mut k.magnitude, mv, grads, lr);
            }
            if let (Some(bk), Some((dv, mv))) = (&mut l.bias_kernel, lv.bias_kernel) {
                apply_kernel_grad(&mut bk.direction, dv, grads, lr);
                apply_kernel_grad(&mut bk.magnitude, mv, grads, lr);
            }
        }
    }
}

/// Fine-tune the convolution parameters on server data. The global model is
/// frozen; only `cp` is updated. Deterministic in the seed.
pub fn finetune_compression(
    global: &ParameterSet,
    plan: &CompressionPlan,
    cp: &ConvParams,
    server_data: &crate::data::Dataset,
    opts: &FinetuneOptions,
) -> Result<ConvParams> {
    if server_data.is_empty() {
        return Err(Error::Usage("finetune_compression on empty server data".into()));
    }
    let slices = slice_global(global, plan)?;
    let mut current = cp.clone();
    let mut indices: Vec<usize> = (0..server_data.len()).collect();
    for epoch in 0..opts.epochs {
        let lr = opts.schedule.lr_at(epoch)?;
        let mut rng = rng_from(opts.seed, &format!("conv-finetune-epoch{epoch}"));
        indices.shuffle(&mut rng);
        for chunk in indices.chunks(opts.batch_size.max(1)) {
            let (batch, labels) = server_data.gather(chunk);
            let mut g = Graph::new();
            let vars = install_conv_params(&mut g, &current, true);
            let layer_vars =
                build_compress_graph(&mut g, plan, &slices, &vars, &opts.features, opts.s_p, opts.s_n)?;
            let x = g.constant(batch);
            let logits = forward_vars(&mut g, &plan.sub_spec, &layer_vars, x)?;
            let loss = g.cross_entropy(logits, &labels)?;
            let grads = g.backward(loss)?;
            current.apply_step(&vars, &grads, lr);
        }
    }
    Ok(current)
}
