//! The full federated loop: initialization and server pre-training,
//! per-device-type compression, simulated client training, per-client
//! dilation, and learned weighted aggregation, round after round.

mod split;

pub use split::{
    apply_proportions, dirichlet_proportions, partition_dirichlet, split_dataset, split_indices,
    DatasetSplits, SplitIndices, SPLIT_RATIOS,
};

use crate::aggregate::{tune_weight_vectors, weighted_aggregate, TuneOptions, WeightVectors};
use crate::compress::{
    compress_model_with, derive_plan, finetune_compression, CompressionPlan, ConvParams,
    FinetuneOptions, KernelPolicy, LrSchedule, PipelineFeatures,
};
use crate::data::{Dataset, ExperimentConfig};
use crate::dilate::{derive_tc_plan, dilate_model, finetune_dilation, TCParams, TCPlan};
use crate::error::{Error, Result};
use crate::model::{evaluate, local_train, ModelSpec, ParameterSet, TrainOptions};
use crate::report::RoundReport;
use crate::rng::{rng_from, sub_seed};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use std::path::Path;
use std::time::Instant;

/// One simulated client: its shrinkage ratio and private partitions.
pub struct ClientProfile {
    pub client_id: usize,
    pub sr: f64,
    pub device_type: usize,
    pub train: Dataset,
    pub test: Dataset,
    /// `s_j`: the number of training samples, used as the aggregation weight.
    pub sample_count: usize,
}

/// What a client sends back to the server: parameters and its sample count.
/// Server-side aggregation code sees nothing else.
pub struct ClientUpdate {
    pub client_id: usize,
    pub device_type: usize,
    pub params: ParameterSet,
    pub sample_count: usize,
}

/// An equivalence class of clients sharing one shrinkage ratio.
pub struct DeviceType {
    pub sr: f64,
    pub plan: CompressionPlan,
    pub tc_plan: TCPlan,
}

/// Mutable state carried across rounds.
pub struct FederationState {
    /// The next round to execute, starting at 1.
    pub round: usize,
    pub global: ParameterSet,
    /// Convolution parameters per device type, persisted across rounds.
    pub conv_params: Vec<ConvParams>,
}

/// A prepared experiment: immutable setup plus evolving state.
pub struct Federation {
    pub config: ExperimentConfig,
    pub spec: ModelSpec,
    pub server_train: Dataset,
    pub server_test: Dataset,
    pub clients: Vec<ClientProfile>,
    pub device_types: Vec<DeviceType>,
    pub state: FederationState,
}

/// Output of one round: the metrics plus the locally trained client models
/// (for checkpointing).
pub struct RoundOutput {
    pub report: RoundReport,
    pub client_params: Vec<(usize, ParameterSet)>,
}

fn sr_key(sr: f64) -> u32 {
    (sr * 1000.0).round() as u32
}

impl Federation {
    /// Load data, split, partition, derive plans, and initialize the global
    /// model and convolution parameters.
    pub fn prepare(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let spec = config.model_spec()?;
        let data = config.load_dataset()?;
        let splits = split_dataset(&data, config.seed)?;
        let n = config.federation.n_clients;
        let srs = config.federation.sr_assignment.client_srs(n)?;

        // One proportion draw shapes both the train and the test partition of
        // each client, so a client is tested on its own distribution. Draws
        // are resampled until every client holds at least one sample of each.
        let mut rng = rng_from(config.seed, "partition");
        let mut parts = None;
        for _ in 0..200 {
            let props = dirichlet_proportions(
                data.class_count(),
                n,
                config.federation.alpha,
                &mut rng,
            )?;
            let train_parts = apply_proportions(&splits.client_train, &props, &mut rng);
            let test_parts = apply_proportions(&splits.client_test, &props, &mut rng);
            if train_parts.iter().all(|p| !p.is_empty())
                && test_parts.iter().all(|p| !p.is_empty())
            {
                parts = Some((train_parts, test_parts));
                break;
            }
        }
        let (train_parts, test_parts) = parts.ok_or_else(|| {
            Error::Config(format!(
                "could not give every one of {n} clients train and test samples \
                 (alpha={})",
                config.federation.alpha
            ))
        })?;

        // device types: one per distinct SR, ascending
        let mut unique: Vec<u32> = srs.iter().map(|&s| sr_key(s)).collect();
        unique.sort_unstable();
        unique.dedup();
        let policy = match config.hyper.kernel_size {
            Some(k) => KernelPolicy::Fixed {
                k,
                stride: config.hyper.kernel_stride,
            },
            None => KernelPolicy::Auto,
        };
        let device_types: Vec<DeviceType> = unique
            .iter()
            .map(|&key| {
                let sr = key as f64 / 1000.0;
                let plan = derive_plan(&spec, sr, policy)?;
                let tc_plan = derive_tc_plan(&plan);
                Ok(DeviceType { sr, plan, tc_plan })
            })
            .collect::<Result<_>>()?;

        let clients: Vec<ClientProfile> = (0..n)
            .map(|j| {
                let device_type = unique
                    .iter()
                    .position(|&k| k == sr_key(srs[j]))
                    .expect("sr present");
                let train = splits.client_train.subset(&train_parts[j])?;
                let test = splits.client_test.subset(&test_parts[j])?;
                let sample_count = train.len();
                Ok(ClientProfile {
                    client_id: j,
                    sr: srs[j],
                    device_type,
                    train,
                    test,
                    sample_count,
                })
            })
            .collect::<Result<_>>()?;

        let global = ParameterSet::init(&spec, config.seed);
        let conv_params: Vec<ConvParams> = device_types
            .iter()
            .map(|dt| {
                if config.flags.identity_pipelines {
                    ConvParams::identity(&dt.plan)
                } else {
                    Ok(ConvParams::init(
                        &dt.plan,
                        sub_seed(config.seed, &format!("conv-params-sr{}", sr_key(dt.sr))),
                    ))
                }
            })
            .collect::<Result<_>>()?;

        Ok(Federation {
            config,
            spec,
            server_train: splits.server_train,
            server_test: splits.server_test,
            clients,
            device_types,
            state: FederationState {
                round: 1,
                global,
                conv_params,
            },
        })
    }

    fn mlr_slopes(&self) -> (f64, f64) {
        if self.config.flags.identity_pipelines {
            (1.0, 1.0)
        } else {
            (self.config.hyper.s_p, self.config.hyper.s_n)
        }
    }

    fn finetune_options(&self, epochs: usize, seed: u64) -> FinetuneOptions {
        let h = &self.config.hyper;
        let (s_p, s_n) = self.mlr_slopes();
        FinetuneOptions {
            epochs,
            batch_size: h.batch_size,
            schedule: LrSchedule::Cosine {
                t_max: h.t_max,
                lr_min: h.lr_min,
                lr_max: h.lr_max,
            },
            s_p,
            s_n,
            features: PipelineFeatures::default(),
            seed,
        }
    }

    /// Server-side pre-training of the global model. Only valid before the
    /// first round.
    pub fn pretrain_global(&mut self, epochs: usize) -> Result<()> {
        if self.state.round != 1 {
            return Err(Error::Usage(format!(
                "pre-training must happen before round 1, state is at round {}",
                self.state.round
            )));
        }
        if epochs == 0 {
            return Ok(());
        }
        let opts = TrainOptions {
            epochs,
            lr: self.config.hyper.local_lr,
            batch_size: self.config.hyper.batch_size,
            seed: sub_seed(self.config.seed, "pretrain"),
        };
        self.state.global = local_train(&self.spec, &self.state.global, &self.server_train, &opts)?;
        Ok(())
    }

    /// Clients participating in round `r` (all of them at participation 1.0).
    fn participants(&self, r: usize) -> Vec<usize> {
        let n = self.clients.len();
        let k = ((self.config.federation.participation * n as f64).ceil() as usize)
            .clamp(1, n);
        if k == n {
            return (0..n).collect();
        }
        let mut ids: Vec<usize> = (0..n).collect();
        let mut rng = rng_from(self.config.seed, &format!("participation.r{r}"));
        ids.shuffle(&mut rng);
        ids.truncate(k);
        ids.sort_unstable();
        ids
    }

    /// Execute one communication round and advance the state.
    pub fn run_round(&mut self) -> Result<RoundOutput> {
        let started = Instant::now();
        let r = self.state.round;
        let seed = self.config.seed;
        let h = self.config.hyper.clone();
        let identity = self.config.flags.identity_pipelines;
        let (s_p, s_n) = self.mlr_slopes();
        let participants = self.participants(r);

        let active_types: Vec<usize> = {
            let mut t: Vec<usize> = participants
                .iter()
                .map(|&j| self.clients[j].device_type)
                .collect();
            t.sort_unstable();
            t.dedup();
            t
        };

        // (a) fine-tune convolution parameters per device type and compress
        let conv_epochs = if identity { 0 } else { h.conv_epochs };
        let tuned: Vec<(usize, ConvParams)> = active_types
            .par_iter()
            .map(|&ti| {
                let dt = &self.device_types[ti];
                let cp = &self.state.conv_params[ti];
                let opts = self.finetune_options(
                    conv_epochs,
                    sub_seed(seed, &format!("conv-finetune.r{r}.sr{}", sr_key(dt.sr))),
                );
                let cp = if conv_epochs > 0 {
                    finetune_compression(&self.state.global, &dt.plan, cp, &self.server_train, &opts)?
                } else {
                    cp.clone()
                };
                Ok((ti, cp))
            })
            .collect::<Result<_>>()
            .map_err(|e| round_step_error("convolution fine-tuning", e))?;
        for (ti, cp) in tuned {
            self.state.conv_params[ti] = cp;
        }
        let sub_models: Vec<Option<ParameterSet>> = {
            let mut subs = vec![None; self.device_types.len()];
            for &ti in &active_types {
                let dt = &self.device_types[ti];
                let sub = compress_model_with(
                    &self.state.global,
                    &dt.plan,
                    &self.state.conv_params[ti],
                    s_p,
                    s_n,
                    &PipelineFeatures::default(),
                )
                .map_err(|e| round_step_error("compression", e))?;
                subs[ti] = Some(sub);
            }
            subs
        };

        // (b)+(c)+(d): dispatch, local training, evaluation, dilation
        let tc_epochs = if identity { 0 } else { h.tc_epochs };
        struct ClientResult {
            update: ClientUpdate,
            accuracy: f64,
            dilated: ParameterSet,
        }
        let results: Vec<ClientResult> = participants
            .par_iter()
            .map(|&j| {
                let client = &self.clients[j];
                let dt = &self.device_types[client.device_type];
                let start = sub_models[client.device_type]
                    .as_ref()
                    .expect("sub-model built for active device type");
                let opts = TrainOptions {
                    epochs: h.local_epochs,
                    lr: h.local_lr,
                    batch_size: h.batch_size,
                    seed: sub_seed(seed, &format!("client{j}.round{r}.local")),
                };
                let trained = local_train(&dt.plan.sub_spec, start, &client.train, &opts)
                    .map_err(|e| round_step_error("local training", e))?;
                let accuracy = evaluate(&dt.plan.sub_spec, &trained, &client.test)
                    .map_err(|e| round_step_error("client evaluation", e))?
                    .accuracy;

                let tp = if identity {
                    TCParams::identity(&dt.tc_plan)
                        .map_err(|e| round_step_error("dilation setup", e))?
                } else {
                    TCParams::init(&dt.tc_plan, sub_seed(seed, &format!("tc-params.r{r}.client{j}")))
                };
                let tp = if tc_epochs > 0 {
                    let opts = self.finetune_options(
                        tc_epochs,
                        sub_seed(seed, &format!("tc-finetune.r{r}.client{j}")),
                    );
                    finetune_dilation(&trained, &dt.tc_plan, &tp, &self.server_train, &opts)
                        .map_err(|e| round_step_error("dilation fine-tuning", e))?
                } else {
                    tp
                };
                let dilated = dilate_model(&trained, &dt.tc_plan, &tp, s_p, s_n)
                    .map_err(|e| round_step_error("dilation", e))?;
                Ok(ClientResult {
                    update: ClientUpdate {
                        client_id: j,
                        device_type: client.device_type,
                        params: trained,
                        sample_count: client.sample_count,
                    },
                    accuracy,
                    dilated,
                })
            })
            .collect::<Result<_>>()?;

        // (e) learned weighted aggregation over the dilated models
        let dilated: Vec<ParameterSet> = results.iter().map(|c| c.dilated.clone()).collect();
        let samples: Vec<usize> = results.iter().map(|c| c.update.sample_count).collect();
        let v = if self.config.flags.tune_weights && !identity {
            let opts = TuneOptions {
                epochs: h.agg_epochs,
                lr: h.agg_lr,
                lambda: h.lambda,
                batch_size: h.batch_size,
                kld_bins: h.kld_bins,
                seed: sub_seed(seed, &format!("agg-tune.r{r}")),
            };
            tune_weight_vectors(
                &dilated,
                &self.state.global,
                &self.server_train,
                &self.spec,
                &samples,
                &opts,
            )
            .map_err(|e| round_step_error("weight-vector tuning", e))?
        } else {
            WeightVectors::ones(dilated.len(), self.spec.layers.len())
        };
        let new_global = weighted_aggregate(&dilated, &v, &samples)
            .map_err(|e| round_step_error("aggregation", e))?;

        // (f) evaluation and reporting
        let global_eval = evaluate(&self.spec, &new_global, &self.server_test)
            .map_err(|e| round_step_error("global evaluation", e))?;
        let client_accuracies: Vec<f64> = results.iter().map(|c| c.accuracy).collect();
        let mean_client_accuracy =
            client_accuracies.iter().sum::<f64>() / client_accuracies.len() as f64;

        self.state.global = new_global;
        self.state.round += 1;

        Ok(RoundOutput {
            report: RoundReport {
                round: r,
                global_accuracy: global_eval.accuracy,
                global_loss: global_eval.loss,
                client_accuracies,
                mean_client_accuracy,
                weight_vectors: v.v,
                elapsed_seconds: started.elapsed().as_secs_f64(),
            },
            client_params: results
                .into_iter()
                .map(|c| (c.update.client_id, c.update.params))
                .collect(),
        })
    }
}

fn round_step_error(step: &str, e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("round step '{step}': {m}")),
        Error::Input(m) => Error::Input(format!("round step '{step}': {m}")),
        Error::Usage(m) => Error::Usage(format!("round step '{step}': {m}")),
        Error::Numerical(m) => Error::Numerical(format!("round step '{step}': {m}")),
        Error::Format(m) => Error::Format(format!("round step '{step}': {m}")),
        Error::Io(e) => Error::Io(e),
    }
}

/// Run a full experiment from a config: prepare, pre-train, iterate rounds,
/// checkpoint, and return the per-round reports.
pub fn run_experiment(config: ExperimentConfig) -> Result<Vec<RoundReport>> {
    let out_dir = config.out_dir.clone();
    let rounds = config.rounds;
    let pretrain_epochs = if config.flags.pretrain {
        config.hyper.pretrain_epochs
    } else {
        0
    };
    let mut fed = Federation::prepare(config)?;
    if let Some(dir) = &out_dir {
        checkpoint_global(dir, 0, &fed.state.global)?;
    }
    fed.pretrain_global(pretrain_epochs)?;
    let mut reports = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let out = fed.run_round()?;
        if let Some(dir) = &out_dir {
            let r = out.report.round;
            checkpoint_global(dir, r, &fed.state.global)?;
            let round_dir = dir.join(format!("round_{r}"));
            for (id, params) in &out.client_params {
                params.save(&round_dir.join(format!("client_{id}.fcps")))?;
            }
            let body = serde_json::to_string_pretty(&out.report)
                .map_err(|e| Error::Format(e.to_string()))?;
            std::fs::write(round_dir.join("report.json"), body + "\n")?;
        }
        reports.push(out.report);
    }
    Ok(reports)
}

fn checkpoint_global(dir: &Path, round: usize, global: &ParameterSet) -> Result<()> {
    let round_dir = dir.join(format!("round_{round}"));
    std::fs::create_dir_all(&round_dir)?;
    global.save(&round_dir.join("global.fcps"))
}
