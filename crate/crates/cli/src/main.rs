//! `tlab`: train, attack and measure transfer-learned classifiers.
//!
//! Exit codes: 0 on success, 2 for invalid configuration or arguments,
//! 1 for failures while running.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use tlab_core::attack::{attack_white_box, AttackSpec};
use tlab_core::checkpoint::load_checkpoint;
use tlab_core::experiment::{resolve_dataset, run_experiment, run_sweep, write_histogram, ExperimentConfig, SweepAxis};
use tlab_core::metrics::{gradient_norm_histogram_in_range, DEFAULT_HIST_BINS};
use tlab_core::Error;

#[derive(Debug, Parser)]
#[command(name = "tlab", version, about = "Transfer-learning robustness experiments")]
struct Cli {
    /// Output directory (overrides the config's output_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Run a single replication with this seed instead of the configured list.
    #[arg(long, global = true)]
    seed_override: Option<u64>,

    /// Worker threads; seeds are distributed across them.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    threads: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train, attack and report one experiment.
    Run {
        /// Experiment config (JSON), or a report.json from an earlier run.
        config: PathBuf,
    },
    /// Run one experiment per value of an axis and aggregate into sweep.csv.
    Sweep {
        config: PathBuf,
        /// n_b, n_a, epsilon, learning_rate or weight_decay.
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Write the input-gradient-norm histogram of a checkpoint.
    Hist {
        checkpoint: PathBuf,
        /// synth:<style>:<n>:<seed> or idx:<images>,<labels>
        #[arg(long)]
        data: String,
        #[arg(long, default_value_t = DEFAULT_HIST_BINS)]
        bins: usize,
        /// FGSM budget for the success/failure split.
        #[arg(long, default_value_t = 16.0 / 255.0)]
        epsilon: f32,
        /// Fix the top bin edge so histograms of several models line up.
        #[arg(long)]
        range_max: Option<f64>,
    },
}

fn load_config(cli: &Cli, path: &PathBuf) -> tlab_core::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = cli.seed_override {
        cfg.seeds = vec![seed];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let threads = cli.threads as usize;
    match &cli.command {
        Command::Run { config } => {
            let cfg = load_config(cli, config)?;
            let report = run_experiment(&cfg, threads)?;
            for row in &report.mean {
                println!(
                    "eps={:.5} clean={:.4} a_w={:.4} a_b={} gamma={}",
                    row.epsilon,
                    row.clean_accuracy,
                    row.a_w,
                    row.a_b.map_or("-".into(), |v| format!("{v:.4}")),
                    row.gamma.map_or("-".into(), |v| format!("{v:.4}")),
                );
            }
            println!("wrote {}", cfg.output_dir.join("results.csv").display());
        }
        Command::Sweep { config, axis, values } => {
            let cfg = load_config(cli, config)?;
            let axis: SweepAxis = axis.parse()?;
            let rows = run_sweep(&cfg, axis, values, threads)?;
            for r in &rows {
                println!("{}={} clean={:.4} a_w={:.4}", r.axis, r.value, r.clean_accuracy, r.a_w);
            }
            println!("wrote {}", cfg.output_dir.join("sweep.csv").display());
        }
        Command::Hist {
            checkpoint,
            data,
            bins,
            epsilon,
            range_max,
        } => {
            if *bins < 2 {
                return Err(Error::Config(format!("--bins must be at least 2, got {bins}")).into());
            }
            let (model, _) =
                load_checkpoint(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
            let testset = resolve_dataset(data, model.num_classes())?;
            let adv = match attack_white_box(&model, &testset, &AttackSpec::white_box(*epsilon)) {
                Ok(adv) => Some(adv),
                Err(Error::EmptySubset) => None,
                Err(e) => return Err(e.into()),
            };
            let hist = gradient_norm_histogram_in_range(&model, &testset, adv.as_ref(), *bins, *range_max)?;
            let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
            std::fs::create_dir_all(&dir)?;
            let path = dir.join("gradnorm_hist.csv");
            write_histogram(&path, &hist)?;
            println!("median={} median_bin={}", hist.median(), hist.median_bin());
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            match err.downcast_ref::<Error>() {
                Some(Error::Config(_)) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
