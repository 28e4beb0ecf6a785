//! Experiment configuration: a flat TOML document with a schema version.
//! Unknown keys are rejected so stale configs fail fast.

use super::Dataset;
use crate::error::{Error, Result};
use crate::model::{Activation, LayerDesc, LayerKind, ModelSpec};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default = "d_seed")]
    pub seed: u64,
    /// Communication rounds. The setting at full scale is 100; desk presets
    /// use 30.
    #[serde(default = "d_rounds")]
    pub rounds: usize,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub federation: FederationConfig,
    #[serde(default)]
    pub hyper: HyperConfig,
    #[serde(default)]
    pub flags: FlagConfig,
}

fn d_seed() -> u64 {
    42
}
fn d_rounds() -> usize {
    30
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// "auto" (IDX files if present, rendered digits otherwise), "digits",
    /// "idx", or "synthetic".
    pub source: String,
    /// Cap on the number of samples (0 = all available).
    #[serde(default)]
    pub subset: usize,
    /// Average-pool factor applied after loading (1 = none).
    #[serde(default = "d_one")]
    pub downsample: usize,
    /// Image side for the rendered-digits source.
    #[serde(default = "d_side")]
    pub side: usize,
    #[serde(default)]
    pub train_images: Option<PathBuf>,
    #[serde(default)]
    pub train_labels: Option<PathBuf>,
    // synthetic blobs
    #[serde(default = "d_classes")]
    pub classes: usize,
    #[serde(default = "d_per_class")]
    pub per_class: usize,
    #[serde(default = "d_sep")]
    pub separation: f64,
    #[serde(default)]
    pub dim: Vec<usize>,
}

fn d_one() -> usize {
    1
}
fn d_side() -> usize {
    28
}
fn d_classes() -> usize {
    10
}
fn d_per_class() -> usize {
    100
}
fn d_sep() -> f64 {
    6.0
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            source: "digits".into(),
            subset: 0,
            downsample: 1,
            side: 28,
            train_images: None,
            train_labels: None,
            classes: 10,
            per_class: 100,
            separation: 6.0,
            dim: vec![],
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Per-sample input shape, e.g. `[1, 28, 28]`.
    pub input: Vec<usize>,
    pub classes: usize,
    pub layers: Vec<LayerConfig>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    pub kind: String,
    pub out_channels: usize,
    #[serde(default)]
    pub kernel: Option<[usize; 2]>,
    #[serde(default = "d_act")]
    pub activation: String,
    #[serde(default = "d_true")]
    pub bias: bool,
}

fn d_act() -> String {
    "relu".into()
}
fn d_true() -> bool {
    true
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    #[serde(default = "d_clients")]
    pub n_clients: usize,
    /// Dirichlet concentration for the non-IID partition.
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub sr_assignment: SrAssignment,
    /// Fraction of clients participating each round.
    #[serde(default = "d_part")]
    pub participation: f64,
}

fn d_clients() -> usize {
    20
}
fn d_alpha() -> f64 {
    0.1
}
fn d_part() -> f64 {
    1.0
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            n_clients: d_clients(),
            alpha: d_alpha(),
            sr_assignment: SrAssignment::default(),
            participation: d_part(),
        }
    }
}

/// How shrinkage ratios map onto clients.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SrAssignment {
    /// Cycle through a grid by client index.
    Grid(Vec<f64>),
    /// Explicit per-client list (length must equal `n_clients`).
    PerClient { per_client: Vec<f64> },
}

impl Default for SrAssignment {
    fn default() -> Self {
        SrAssignment::Grid(vec![0.25, 0.5, 0.75, 1.0])
    }
}

impl SrAssignment {
    pub fn client_srs(&self, n_clients: usize) -> Result<Vec<f64>> {
        let srs = match self {
            SrAssignment::Grid(grid) => {
                if grid.is_empty() {
                    return Err(Error::Config("empty SR grid".into()));
                }
                (0..n_clients).map(|i| grid[i % grid.len()]).collect()
            }
            SrAssignment::PerClient { per_client } => {
                if per_client.len() != n_clients {
                    return Err(Error::Config(format!(
                        "{} SRs for {} clients",
                        per_client.len(),
                        n_clients
                    )));
                }
                per_client.clone()
            }
        };
        if srs.iter().any(|&sr| !(0.0..=1.0).contains(&sr) || sr <= 0.0) {
            return Err(Error::Config("shrinkage ratios must lie in (0, 1]".into()));
        }
        Ok(srs)
    }
}

/// All tunable hyperparameters. Defaults are the evaluation settings:
/// 5 local epochs at lr 0.001, 5 pre-training epochs, 20 epochs for the
/// convolution and TC parameters, cosine schedule (T_max 4, 1e-5..1e-3),
/// MLR slopes 0.85 / 0.001, and aggregation tuning (10 epochs, lr 0.001,
/// lambda 0.2).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperConfig {
    #[serde(default = "d_local_epochs")]
    pub local_epochs: usize,
    #[serde(default = "d_lr")]
    pub local_lr: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_pretrain_epochs")]
    pub pretrain_epochs: usize,
    #[serde(default = "d_conv_epochs")]
    pub conv_epochs: usize,
    #[serde(default = "d_conv_epochs")]
    pub tc_epochs: usize,
    #[serde(default = "d_tmax")]
    pub t_max: usize,
    #[serde(default = "d_lr_min")]
    pub lr_min: f64,
    #[serde(default = "d_lr")]
    pub lr_max: f64,
    #[serde(default = "d_sp")]
    pub s_p: f64,
    #[serde(default = "d_sn")]
    pub s_n: f64,
    #[serde(default = "d_agg_epochs")]
    pub agg_epochs: usize,
    #[serde(default = "d_lr")]
    pub agg_lr: f64,
    #[serde(default = "d_lambda")]
    pub lambda: f64,
    #[serde(default = "d_kld_bins")]
    pub kld_bins: usize,
    /// Optional override of the compression kernel policy: fixed kernel size
    /// with the given stride, padding solved per layer.
    #[serde(default)]
    pub kernel_size: Option<usize>,
    #[serde(default = "d_one_usize")]
    pub kernel_stride: usize,
}

fn d_local_epochs() -> usize {
    5
}
fn d_lr() -> f64 {
    0.001
}
fn d_batch() -> usize {
    32
}
fn d_pretrain_epochs() -> usize {
    5
}
fn d_conv_epochs() -> usize {
    20
}
fn d_tmax() -> usize {
    4
}
fn d_lr_min() -> f64 {
    0.00001
}
fn d_sp() -> f64 {
    0.85
}
fn d_sn() -> f64 {
    0.001
}
fn d_agg_epochs() -> usize {
    10
}
fn d_lambda() -> f64 {
    0.2
}
fn d_kld_bins() -> usize {
    64
}
fn d_one_usize() -> usize {
    1
}

impl Default for HyperConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlagConfig {
    #[serde(default = "d_true")]
    pub pretrain: bool,
    #[serde(default = "d_true")]
    pub tune_weights: bool,
    /// Degenerate mode for the FedAvg-equivalence oracle: identity
    /// compression/dilation kernels, no fine-tuning, MLR slopes forced to 1.
    #[serde(default)]
    pub identity_pipelines: bool,
}

impl Default for FlagConfig {
    fn default() -> Self {
        FlagConfig {
            pretrain: true,
            tune_weights: true,
            identity_pipelines: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.federation.n_clients == 0 {
            return Err(Error::Config("n_clients must be at least 1".into()));
        }
        if self.federation.alpha <= 0.0 {
            return Err(Error::Config("alpha must be positive".into()));
        }
        if !(0.0 < self.federation.participation && self.federation.participation <= 1.0) {
            return Err(Error::Config("participation must lie in (0, 1]".into()));
        }
        if self.hyper.lr_max < self.hyper.lr_min {
            return Err(Error::Config("lr_max must be >= lr_min".into()));
        }
        self.federation
            .sr_assignment
            .client_srs(self.federation.n_clients)?;
        self.model_spec()?;
        Ok(())
    }

    /// Build the global model spec from the config.
    pub fn model_spec(&self) -> Result<ModelSpec> {
        let descs: Vec<LayerDesc> = self
            .model
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let kind = match l.kind.as_str() {
                    "conv2d" => LayerKind::Conv2d,
                    "dense" => LayerKind::Dense,
                    other => {
                        return Err(Error::Config(format!("unknown layer kind {other}")));
                    }
                };
                let activation = match l.activation.as_str() {
                    "relu" => Activation::Relu,
                    "none" => Activation::None,
                    other => return Err(Error::Config(format!("unknown activation {other}"))),
                };
                let name = match kind {
                    LayerKind::Conv2d => format!("conv{}", i + 1),
                    LayerKind::Dense => format!("fc{}", i + 1),
                };
                Ok(LayerDesc {
                    name,
                    kind,
                    out_channels: l.out_channels,
                    kernel: l.kernel.map(|[a, b]| (a, b)),
                    activation,
                    has_bias: l.bias,
                })
            })
            .collect::<Result<_>>()?;
        ModelSpec::build(&self.model.input, &descs, self.model.classes)
    }

    /// Load the configured dataset, applying the subset cap and downsampling.
    pub fn load_dataset(&self) -> Result<Dataset> {
        let d = &self.dataset;
        let base = match d.source.as_str() {
            "idx" => {
                let images = d
                    .train_images
                    .as_ref()
                    .ok_or_else(|| Error::Config("idx source needs train_images".into()))?;
                let labels = d
                    .train_labels
                    .as_ref()
                    .ok_or_else(|| Error::Config("idx source needs train_labels".into()))?;
                super::load_idx(images, labels)?
            }
            "digits" => {
                let n = if d.subset > 0 { d.subset } else { 10_000 };
                super::gen_digits(n, d.side, self.seed)?
            }
            "synthetic" => {
                let shape = if d.dim.is_empty() { vec![8] } else { d.dim.clone() };
                super::gen_synthetic(d.classes, d.per_class, &shape, d.separation, self.seed)?
            }
            "auto" => match mnist_dir() {
                Some(dir) => super::load_idx(
                    &dir.join("train-images-idx3-ubyte"),
                    &dir.join("train-labels-idx1-ubyte"),
                )?,
                None => {
                    let n = if d.subset > 0 { d.subset } else { 10_000 };
                    super::gen_digits(n, d.side, self.seed)?
                }
            },
            other => return Err(Error::Config(format!("unknown dataset source {other}"))),
        };
        let capped = if d.subset > 0 && base.len() > d.subset {
            let idx: Vec<usize> = (0..d.subset).collect();
            base.subset(&idx)?
        } else {
            base
        };
        capped.downsample(d.downsample)
    }
}

/// Directory holding real MNIST IDX files, if one is configured and populated.
/// Checks `$FEDCONV_MNIST_DIR` and `./data/mnist`.
pub fn mnist_dir() -> Option<PathBuf> {
    let candidates = [
        std::env::var_os("FEDCONV_MNIST_DIR").map(PathBuf::from),
        Some(PathBuf::from("data/mnist")),
    ];
    for c in candidates.into_iter().flatten() {
        if c.join("train-images-idx3-ubyte").exists() && c.join("train-labels-idx1-ubyte").exists()
        {
            return Some(c);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SMALL_TOML: &str = r#"
schema_version = 1
seed = 7
rounds = 2

[dataset]
source = "synthetic"
classes = 3
per_class = 30
dim = [6]
separation = 8.0

[model]
input = [6]
classes = 3

[[model.layers]]
kind = "dense"
out_channels = 3
activation = "none"

[federation]
n_clients = 2
alpha = 1.0
sr_assignment = [1.0]
"#;

    #[test]
    fn parses_and_defaults_match_evaluation_settings() {
        let cfg = ExperimentConfig::from_toml(SMALL_TOML).unwrap();
        assert_eq!(cfg.hyper.local_epochs, 5);
        assert_eq!(cfg.hyper.local_lr, 0.001);
        assert_eq!(cfg.hyper.pretrain_epochs, 5);
        assert_eq!(cfg.hyper.conv_epochs, 20);
        assert_eq!(cfg.hyper.tc_epochs, 20);
        assert_eq!(cfg.hyper.t_max, 4);
        assert_eq!(cfg.hyper.lr_min, 0.00001);
        assert_eq!(cfg.hyper.lr_max, 0.001);
        assert_eq!(cfg.hyper.s_p, 0.85);
        assert_eq!(cfg.hyper.s_n, 0.001);
        assert_eq!(cfg.hyper.agg_epochs, 10);
        assert_eq!(cfg.hyper.agg_lr, 0.001);
        assert_eq!(cfg.hyper.lambda, 0.2);
        assert!(cfg.flags.pretrain);
        assert!(cfg.flags.tune_weights);
        assert_eq!(cfg.rounds, 2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = SMALL_TOML.replace("seed = 7", "seed = 7\nbogus_knob = 3");
        assert!(matches!(
            ExperimentConfig::from_toml(&bad),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn wrong_schema_version_rejected() {
        let bad = SMALL_TOML.replace("schema_version = 1", "schema_version = 99");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn model_spec_builds() {
        let cfg = ExperimentConfig::from_toml(SMALL_TOML).unwrap();
        let spec = cfg.model_spec().unwrap();
        assert_eq!(spec.layers.len(), 1);
        assert_eq!(spec.layers[0].in_channels, 6);
    }

    #[test]
    fn dataset_loads_with_subset() {
        let cfg = ExperimentConfig::from_toml(SMALL_TOML).unwrap();
        let d = cfg.load_dataset().unwrap();
        assert_eq!(d.len(), 90);
    }
}
