//! Command-line driver: run experiments, inspect partitions, run ablations.

use clap::{Parser, Subcommand, ValueEnum};
use fedconv::data::{emit_metrics, ExperimentConfig, MetricsFormat};
use fedconv::diagnostics::{compression_vs_pruning_study, fedavg_baseline, MiStudyOptions};
use fedconv::federation::{run_experiment, Federation};
use fedconv::report::RoundReport;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "fedconv", version, about = "Federated learning with convolutional model compression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a federated experiment from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the number of communication rounds.
        #[arg(long)]
        rounds: Option<usize>,
        /// Override the root seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the checkpoint/metrics output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print per-client class histograms for the configured partition.
    PartitionStats {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run one ablation arm or the pruning/MI study.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        mode: AblateMode,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AblateMode {
    /// Aggregate with sample weights only (no learned weight vectors).
    NaiveAgg,
    /// Skip server-side pre-training.
    NoPretrain,
    /// Classical FedAvg with the smallest affordable model everywhere.
    FedavgBaseline,
    /// Mutual-information comparison of compression against pruning.
    PruningMi,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(
    path: &PathBuf,
    rounds: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> fedconv::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_file(path)?;
    if let Some(r) = rounds {
        cfg.rounds = r;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = Some(o);
    }
    Ok(cfg)
}

fn print_reports(reports: &[RoundReport]) {
    println!("round  global_acc  global_loss  mean_client_acc");
    for r in reports {
        println!(
            "{:>5}  {:>10.4}  {:>11.4}  {:>15.4}",
            r.round, r.global_accuracy, r.global_loss, r.mean_client_accuracy
        );
    }
}

fn write_metrics(reports: &[RoundReport], out_dir: &Option<PathBuf>) -> fedconv::Result<()> {
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        emit_metrics(reports, &dir.join("reports.json"), MetricsFormat::Json)?;
        emit_metrics(reports, &dir.join("reports.csv"), MetricsFormat::Csv)?;
        println!("metrics written to {}", dir.display());
    }
    Ok(())
}

fn dispatch(cli: Cli) -> fedconv::Result<()> {
    match cli.command {
        Command::Run {
            config,
            rounds,
            seed,
            out,
        } => {
            let cfg = load_config(&config, rounds, seed, out)?;
            let out_dir = cfg.out_dir.clone();
            let reports = run_experiment(cfg)?;
            print_reports(&reports);
            write_metrics(&reports, &out_dir)
        }
        Command::PartitionStats { config } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let fed = Federation::prepare(cfg)?;
            let classes = fed.server_train.class_count();
            print!("client     sr  samples |");
            for c in 0..classes {
                print!(" {c:>4}");
            }
            println!();
            for client in &fed.clients {
                let mut counts = vec![0usize; classes];
                for &l in client.train.labels() {
                    counts[l] += 1;
                }
                print!(
                    "{:>6}  {:>5.2}  {:>7} |",
                    client.client_id, client.sr, client.sample_count
                );
                for c in counts {
                    print!(" {c:>4}");
                }
                println!();
            }
            Ok(())
        }
        Command::Ablate {
            config,
            mode,
            rounds,
            seed,
            out,
        } => {
            let mut cfg = load_config(&config, rounds, seed, out)?;
            match mode {
                AblateMode::NaiveAgg => {
                    cfg.flags.tune_weights = false;
                    println!("# ablation: sample-weighted average only (weight vectors fixed at 1)");
                    let out_dir = cfg.out_dir.clone();
                    let reports = run_experiment(cfg)?;
                    print_reports(&reports);
                    write_metrics(&reports, &out_dir)
                }
                AblateMode::NoPretrain => {
                    cfg.flags.pretrain = false;
                    println!("# ablation: no server-side pre-training");
                    let out_dir = cfg.out_dir.clone();
                    let reports = run_experiment(cfg)?;
                    print_reports(&reports);
                    write_metrics(&reports, &out_dir)
                }
                AblateMode::FedavgBaseline => {
                    println!("# baseline: FedAvg at the smallest shrinkage ratio");
                    let out_dir = cfg.out_dir.clone();
                    let reports = fedavg_baseline(cfg)?;
                    print_reports(&reports);
                    write_metrics(&reports, &out_dir)
                }
                AblateMode::PruningMi => {
                    let study = compression_vs_pruning_study(&cfg, &MiStudyOptions::default())?;
                    println!("variant            MI (bits)   accuracy");
                    println!(
                        "self               {:>9.4}   {:>8.4}",
                        study.self_mi.bits, study.global_accuracy
                    );
                    println!(
                        "conv-compressed    {:>9.4}   {:>8.4}",
                        study.compressed_mi.bits, study.compressed_accuracy
                    );
                    println!(
                        "channel-pruned     {:>9.4}   {:>8.4}",
                        study.channel_pruned_mi.bits, study.channel_pruned_accuracy
                    );
                    println!(
                        "filter-pruned      {:>9.4}   {:>8.4}",
                        study.filter_pruned_mi.bits, study.filter_pruned_accuracy
                    );
                    Ok(())
                }
            }
        }
    }
}
