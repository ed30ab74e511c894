//! Pipeline driver. Subcommands mirror the training flow: pre-train the
//! constrained analog network, convert it with threshold balancing,
//! fine-tune with spike-timing backpropagation, evaluate, and analyze
//! spike activity. All randomness flows from the configured seed, so every
//! run is replayable.

use clap::{Args, Parser, Subcommand};
use snn_core::analysis::{compare_energy, report_from_counter, write_report_csv};
use snn_core::conversion::{balance_thresholds, copy_weights, BalanceConfig};
use snn_core::data::Dataset;
use snn_core::io::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainingPhase};
use snn_core::io::config::RunConfig;
use snn_core::io::{load_cifar_binary, load_mnist_dir};
use snn_core::network::{presets, ArchitectureSpec, NetworkParams};
use snn_core::training::{
    ann_accuracy, snn_accuracy, train_ann, train_stdb, MetricsSink, SnnEvalConfig, TrainConfig,
};
use snn_core::{Result, SnnError};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "snn",
    about = "Spiking network pipeline: constrained pre-training, threshold-balanced conversion, spike-timing fine-tuning",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Configuration file (TOML); flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Random seed for the whole run.
    #[arg(long)]
    seed: Option<u64>,
    /// Simulation length T.
    #[arg(long)]
    timesteps: Option<usize>,
    /// Truncation interval t' (defaults to T: full unrolling).
    #[arg(long)]
    truncate: Option<usize>,
    /// Surrogate gradient family.
    #[arg(long, value_parser = ["stdb", "linear", "exp"])]
    surrogate: Option<String>,
    /// Architecture preset (vgg5, resnet8-lite).
    #[arg(long)]
    arch: Option<String>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the constrained analog network and write an `ann` checkpoint.
    TrainAnn(CommonArgs),
    /// Copy weights from an `ann` checkpoint and balance thresholds at the
    /// given number of time steps; writes a `converted` checkpoint.
    Convert {
        #[command(flatten)]
        common: CommonArgs,
        /// Source checkpoint (phase `ann`).
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Fine-tune a `converted` checkpoint with spike-timing
    /// backpropagation; writes an `stdb` checkpoint.
    TrainStdb {
        #[command(flatten)]
        common: CommonArgs,
        /// Source checkpoint (phase `converted`).
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Evaluate a checkpoint: analog accuracy for `ann`, spiking accuracy
    /// at T for the rest.
    Infer {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate on at most this many test samples.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Spike-activity report (CSV) for a checkpoint; optionally compare
    /// against a second checkpoint under identical conditions.
    AnalyzeSpikes {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Second checkpoint for an iso-condition comparison.
        #[arg(long)]
        compare: Option<PathBuf>,
        /// Number of evaluation samples for the report.
        #[arg(long, default_value_t = 1500)]
        samples: usize,
    },
    /// Run the verification suite (gradient oracles, finite differences,
    /// conservation, lookup-table identity) and print pass/fail lines.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    };
    std::process::exit(code);
}

fn effective_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_path(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.run.seed = seed;
    }
    if let Some(t) = common.timesteps {
        cfg.train.timesteps = t;
    }
    if let Some(t) = common.truncate {
        cfg.train.truncate = t;
    }
    if let Some(s) = &common.surrogate {
        cfg.train.surrogate = match s.as_str() {
            "stdb" => snn_core::neuron::SurrogateFamily::SpikeTime,
            "linear" => snn_core::neuron::SurrogateFamily::Linear,
            "exp" => snn_core::neuron::SurrogateFamily::Exponential,
            _ => unreachable!("clap restricts the values"),
        };
    }
    if let Some(a) = &common.arch {
        cfg.model.arch = a.clone();
    }
    if let Some(e) = common.epochs {
        cfg.train.epochs = e;
    }
    if let Some(out) = &common.out {
        cfg.run.out_dir = out.display().to_string();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_dataset(cfg: &RunConfig) -> Result<(Dataset<f32>, Dataset<f32>)> {
    match cfg.dataset.name.as_str() {
        "mnist" => load_mnist_dir(Path::new(&cfg.dataset.path)),
        "cifar10" => {
            let dir = Path::new(&cfg.dataset.path);
            let mut train_parts = Vec::new();
            for i in 1..=5 {
                let p = dir.join(format!("data_batch_{i}.bin"));
                if p.exists() {
                    train_parts.push(load_cifar_binary::<f32>(&p)?);
                }
            }
            if train_parts.is_empty() {
                return Err(SnnError::Config(format!(
                    "no data_batch_*.bin files under {}",
                    dir.display()
                )));
            }
            let classes = train_parts[0].classes;
            let images = snn_core::Tensor::concat_rows(
                &train_parts.iter().map(|d| d.images.clone()).collect::<Vec<_>>(),
            )?;
            let labels = train_parts
                .iter()
                .flat_map(|d| d.labels.iter().copied())
                .collect();
            let train = Dataset::new(images, labels, classes)?;
            let test = load_cifar_binary::<f32>(&dir.join("test_batch.bin"))?;
            Ok((train, test))
        }
        other => Err(SnnError::Config(format!("unknown dataset '{other}'"))),
    }
}

fn arch_for(cfg: &RunConfig, ds: &Dataset<f32>) -> Result<ArchitectureSpec> {
    presets::preset(&cfg.model.arch, ds.input_shape(), ds.classes)
}

fn out_path(cfg: &RunConfig, name: &str) -> Result<PathBuf> {
    let dir = PathBuf::from(&cfg.run.out_dir);
    std::fs::create_dir_all(&dir)
        .map_err(|e| SnnError::io(format!("creating {}", dir.display()), e))?;
    Ok(dir.join(name))
}

fn spike_labels(arch: &ArchitectureSpec) -> Result<Vec<String>> {
    Ok(arch
        .slots()?
        .iter()
        .filter(|s| s.spiking)
        .map(|s| s.label.clone())
        .collect())
}

fn checkpoint_from(
    cfg: &RunConfig,
    arch: &ArchitectureSpec,
    params: NetworkParams<f32>,
    phase: TrainingPhase,
    epochs: u32,
) -> Checkpoint {
    Checkpoint {
        arch: arch.clone(),
        params,
        phase,
        epochs,
        seed: cfg.run.seed,
        leak: cfg.train.leak,
        alpha: cfg.train.alpha,
        beta: cfg.train.beta,
        timesteps: cfg.train.timesteps as u32,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainAnn(common) => {
            let cfg = effective_config(&common)?;
            let (train_ds, test_ds) = load_dataset(&cfg)?;
            let arch = arch_for(&cfg, &train_ds)?;
            let tc = cfg.train_config();
            let mut metrics =
                MetricsSink::with_csv(&out_path(&cfg, "ann_metrics.csv")?, vec![])?;
            let params = train_ann::<f32>(&arch, &train_ds, Some(&test_ds), &tc, &mut metrics)?;
            let acc = ann_accuracy(&params, &arch, &test_ds)?;
            println!("analog test accuracy: {acc:.4}");
            let path = out_path(&cfg, "ann.snnf")?;
            save_checkpoint(
                &path,
                &checkpoint_from(&cfg, &arch, params, TrainingPhase::Ann, tc.epochs as u32),
            )?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Convert { common, checkpoint } => {
            let cfg = effective_config(&common)?;
            let source = load_checkpoint(&checkpoint)?;
            let (train_ds, _) = load_dataset(&cfg)?;
            let arch = source.arch.clone();
            let mut params = NetworkParams::random_init(&arch, cfg.run.seed)?;
            copy_weights(&source.params, &mut params, &arch)?;
            let calib_n = cfg.train.calibration_batch.min(train_ds.len());
            let calib = train_ds.take(calib_n);
            let bal = BalanceConfig {
                timesteps: cfg.train.timesteps,
                seed: cfg.run.seed,
                leak: cfg.train.leak as f32,
                scale: 1.0,
                floor: None,
            };
            let set = balance_thresholds(&mut params, &arch, &calib.images, &bal)?;
            for (i, v) in set.values.iter().enumerate() {
                if let Some(v) = v {
                    println!("threshold slot {i}: {v:.5}");
                }
            }
            let path = out_path(&cfg, &format!("converted_t{}.snnf", cfg.train.timesteps))?;
            save_checkpoint(
                &path,
                &checkpoint_from(&cfg, &arch, params, TrainingPhase::Converted, 0),
            )?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::TrainStdb { common, checkpoint } => {
            let cfg = effective_config(&common)?;
            let source = load_checkpoint(&checkpoint)?;
            if source.phase == TrainingPhase::Ann {
                return Err(SnnError::Config(
                    "fine-tuning expects a converted checkpoint; run `convert` first".into(),
                ));
            }
            let (train_ds, test_ds) = load_dataset(&cfg)?;
            let arch = source.arch.clone();
            let tc = cfg.train_config();
            let mut metrics = MetricsSink::with_csv(
                &out_path(&cfg, "stdb_metrics.csv")?,
                spike_labels(&arch)?,
            )?;
            let params =
                train_stdb(source.params, &arch, &train_ds, Some(&test_ds), &tc, &mut metrics)?;
            let path = out_path(&cfg, &format!("stdb_t{}.snnf", cfg.train.timesteps))?;
            save_checkpoint(
                &path,
                &checkpoint_from(&cfg, &arch, params, TrainingPhase::Stdb, tc.epochs as u32),
            )?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Infer {
            common,
            checkpoint,
            limit,
        } => {
            let cfg = effective_config(&common)?;
            let source = load_checkpoint(&checkpoint)?;
            let (_, test_ds) = load_dataset(&cfg)?;
            let eval = match limit {
                Some(n) => test_ds.take(n),
                None => test_ds,
            };
            match source.phase {
                TrainingPhase::Ann => {
                    let acc = ann_accuracy(&source.params, &source.arch, &eval)?;
                    println!("analog accuracy over {} samples: {acc:.4}", eval.len());
                }
                _ => {
                    let ec = SnnEvalConfig {
                        timesteps: cfg.train.timesteps,
                        leak: cfg.train.leak as f32,
                        seed: cfg.run.seed,
                        batch: 64,
                    };
                    let (acc, _) = snn_accuracy(&source.params, &source.arch, &eval, &ec)?;
                    println!(
                        "spiking accuracy over {} samples at T={}: {acc:.4}",
                        eval.len(),
                        ec.timesteps
                    );
                }
            }
            Ok(())
        }
        Command::AnalyzeSpikes {
            common,
            checkpoint,
            compare,
            samples,
        } => {
            let cfg = effective_config(&common)?;
            let source = load_checkpoint(&checkpoint)?;
            let (_, test_ds) = load_dataset(&cfg)?;
            let eval = test_ds.take(samples);
            let ec = SnnEvalConfig {
                timesteps: cfg.train.timesteps,
                leak: cfg.train.leak as f32,
                seed: cfg.run.seed,
                batch: 64,
            };
            let thresholds: Vec<Option<f64>> = source
                .params
                .thresholds
                .iter()
                .map(|t| t.map(|v| v as f64))
                .collect();
            let (acc, counter) = snn_accuracy(&source.params, &source.arch, &eval, &ec)?;
            let report = report_from_counter(&counter, &source.arch, &thresholds)?;
            println!(
                "accuracy {acc:.4} over {} samples at T={}; total spikes/sample {:.1}; energy-delay proxy {:.1}",
                eval.len(),
                ec.timesteps,
                report.total_spikes_per_sample,
                report.energy_delay_proxy
            );
            for l in &report.layers {
                println!(
                    "  {:<10} v={:<8} avg spikes/neuron {:.3}",
                    l.label,
                    l.threshold.map_or("-".into(), |v| format!("{v:.4}")),
                    l.avg_spikes_per_neuron
                );
            }
            let csv = out_path(&cfg, "spike_report.csv")?;
            write_report_csv(&report, &csv)?;
            println!("wrote {}", csv.display());

            if let Some(other_path) = compare {
                let other = load_checkpoint(&other_path)?;
                let (oacc, ocounter) =
                    snn_accuracy(&other.params, &other.arch, &eval, &ec)?;
                let othresholds: Vec<Option<f64>> = other
                    .params
                    .thresholds
                    .iter()
                    .map(|t| t.map(|v| v as f64))
                    .collect();
                let oreport = report_from_counter(&ocounter, &other.arch, &othresholds)?;
                let cmp = compare_energy(&report, &oreport)?;
                println!(
                    "comparison (this / other): aggregate spike ratio {:.3}, proxy ratio {:.3} (other accuracy {oacc:.4})",
                    cmp.aggregate_ratio, cmp.proxy_ratio
                );
                for (label, r) in &cmp.per_layer_ratio {
                    println!("  {label:<10} ratio {r:.3}");
                }
            }
            Ok(())
        }
        Command::Gradcheck { seed } => {
            let results = snn_core::verify::run_all(seed);
            let mut all_pass = true;
            for r in &results {
                println!(
                    "[{}] {} — {}",
                    if r.pass { "PASS" } else { "FAIL" },
                    r.name,
                    r.detail
                );
                all_pass &= r.pass;
            }
            if all_pass {
                Ok(())
            } else {
                Err(SnnError::Config("verification suite failed".into()))
            }
        }
    }
}
