use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rec::engine::EngineConfig;
use rec::experiments::{
    cmd_ablation, cmd_cold_start, cmd_compare_pmf, cmd_online, cmd_train, DataFormat, ExperimentConfig,
    SyntheticSpec,
};
use rec::training::TrainConfig;

#[derive(Parser)]
#[command(name = "rec", version, about = "Matrix completion with recursively generated embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain, train and report validation RMSE.
    Train(Flags),
    /// Race REC against PMF under the same protocol.
    ComparePmf(Flags),
    /// Train on a slice of rows and columns, then evaluate as the rest arrive.
    Online(Flags),
    /// Retrain with sampled users thinned to a few ratings.
    ColdStart(Flags),
    /// Count generation work under each complexity-control combination.
    Ablation(Flags),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Ml100k,
    Mldelim,
    Synthetic,
}

#[derive(Args, Clone)]
struct Flags {
    /// Ratings file (ignored for synthetic data).
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "ml100k")]
    format: Format,
    #[arg(long, env = "REC_OUTPUT_DIR", default_value = "results")]
    output_dir: PathBuf,

    #[arg(long, default_value_t = 100)]
    synthetic_users: usize,
    #[arg(long, default_value_t = 100)]
    synthetic_items: usize,
    #[arg(long, default_value_t = 2)]
    synthetic_rank: usize,
    #[arg(long, default_value_t = 0.3)]
    synthetic_density: f64,
    #[arg(long, default_value_t = 0.0)]
    synthetic_noise: f64,
    #[arg(long, default_value_t = 0)]
    synthetic_seed: u64,

    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// Validation indices to reuse, one per line.
    #[arg(long)]
    split_file: Option<PathBuf>,

    #[arg(long, default_value_t = 100)]
    k: usize,
    #[arg(long, default_value_t = 50)]
    proto_users: usize,
    #[arg(long, default_value_t = 50)]
    proto_items: usize,
    #[arg(long, default_value_t = 4)]
    max_depth: usize,
    /// Evidence limit; 0 aggregates every rating.
    #[arg(long, default_value_t = 80)]
    evidence_limit: usize,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    cycle_blocking: bool,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    caching: bool,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    negative_caching: bool,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    prototype_prioritization: bool,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    telescoping: bool,

    #[arg(long, default_value_t = 1000)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1e-5)]
    lambda: f64,
    #[arg(long, default_value_t = 2000)]
    iterations: usize,
    #[arg(long, default_value_t = 500)]
    pretrain_iterations: usize,
    #[arg(long, default_value_t = 1e-3)]
    pretrain_lr: f64,
    #[arg(long, default_value_t = 10)]
    eval_every: usize,
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    #[arg(long, default_value_t = 0)]
    init_seed: u64,
    #[arg(long, default_value_t = 1)]
    sampling_seed: u64,
    #[arg(long, default_value_t = 2)]
    eval_seed: u64,

    #[arg(long, default_value_t = 250)]
    compare_iterations: usize,
    #[arg(long, default_value_t = 0.2)]
    online_initial_fraction: f64,
    #[arg(long, default_value_t = 0.2)]
    online_increment: f64,
    #[arg(long, default_value_t = 3)]
    online_seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "0,50,100,150")]
    coldstart_nc: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    coldstart_nr: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    coldstart_seed: u64,
    #[arg(long, default_value_t = 10)]
    ablation_batch: usize,
    #[arg(long, default_value_t = 2)]
    ablation_max_depth: usize,
    #[arg(long, default_value_t = 80)]
    ablation_evidence_limit: usize,
    #[arg(long, default_value_t = 20)]
    ablation_seeds: usize,
}

impl Flags {
    fn resolve(self) -> ExperimentConfig {
        let engine = EngineConfig {
            max_depth: self.max_depth,
            evidence_limit: (self.evidence_limit > 0).then_some(self.evidence_limit),
            cycle_blocking: self.cycle_blocking,
            caching: self.caching,
            negative_caching: self.negative_caching,
            prototype_prioritization: self.prototype_prioritization,
            telescoping: self.telescoping,
        };
        ExperimentConfig {
            dataset: self.dataset,
            format: match self.format {
                Format::Ml100k => DataFormat::Ml100k,
                Format::Mldelim => DataFormat::Mldelim,
                Format::Synthetic => DataFormat::Synthetic,
            },
            synthetic: SyntheticSpec {
                users: self.synthetic_users,
                items: self.synthetic_items,
                rank: self.synthetic_rank,
                density: self.synthetic_density,
                noise_sd: self.synthetic_noise,
                seed: self.synthetic_seed,
            },
            train_fraction: self.train_fraction,
            split_seed: self.split_seed,
            split_file: self.split_file,
            train: TrainConfig {
                k: self.k,
                num_proto_users: self.proto_users,
                num_proto_items: self.proto_items,
                engine,
                batch_size: self.batch_size,
                lr: self.lr,
                lambda: self.lambda,
                iterations: self.iterations,
                pretrain_iterations: self.pretrain_iterations,
                pretrain_lr: self.pretrain_lr,
                eval_every: self.eval_every,
                init_seed: self.init_seed,
                sampling_seed: self.sampling_seed,
                eval_seed: self.eval_seed,
                checkpoint_every: self.checkpoint_every,
                checkpoint_path: None,
            },
            compare_iterations: self.compare_iterations,
            online_initial_fraction: self.online_initial_fraction,
            online_increment: self.online_increment,
            online_seed: self.online_seed,
            coldstart_nc: self.coldstart_nc,
            coldstart_nr: self.coldstart_nr,
            coldstart_seed: self.coldstart_seed,
            ablation_batch: self.ablation_batch,
            ablation_max_depth: self.ablation_max_depth,
            ablation_evidence_limit: self.ablation_evidence_limit,
            ablation_seeds: self.ablation_seeds,
            output_dir: self.output_dir,
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(f) => {
            let out = cmd_train(&f.resolve()).context("train failed")?;
            println!("final validation RMSE: {:.6}", out.final_valid_rmse);
            println!("metrics: {}", out.metrics.display());
            println!("checkpoint: {}", out.checkpoint.display());
        }
        Command::ComparePmf(f) => {
            let out = cmd_compare_pmf(&f.resolve()).context("compare-pmf failed")?;
            let last = |r: &rec::training::TrainReport| r.last_valid_rmse().unwrap_or(f64::NAN);
            println!("REC final validation RMSE: {:.6}", last(&out.rec));
            println!("PMF final validation RMSE: {:.6}", last(&out.pmf));
            println!("metrics: {} {}", out.rec_metrics.display(), out.pmf_metrics.display());
        }
        Command::Online(f) => {
            let out = cmd_online(&f.resolve()).context("online failed")?;
            for s in &out.stages {
                println!("{:>5.1}% rows/cols: RMSE {:.6} on {} test ratings", 100.0 * s.fraction, s.rmse, s.test_ratings);
            }
            println!("novel-data RMSE: {:.6}", out.novel_rmse);
            println!("parameters: {} ({:.2} M)", out.num_parameters, out.num_parameters as f64 / 1e6);
            println!("ratings seen in training: {:.2}%", out.percent_seen_in_training);
            println!("results: {}", out.csv.display());
        }
        Command::ColdStart(f) => {
            let out = cmd_cold_start(&f.resolve()).context("cold-start failed")?;
            println!("mean predictor RMSE: {:.6}", out.mean_predictor_rmse);
            for c in &out.cells {
                println!("N_c={:<4} n_r={:<3} RMSE {:.6}", c.n_c, c.n_r, c.valid_rmse);
            }
            println!("results: {}", out.csv.display());
        }
        Command::Ablation(f) => {
            let rows = cmd_ablation(&f.resolve()).context("ablation failed")?;
            for r in &rows {
                println!(
                    "{:<18} cache={:<5} generated {:>12.1} failed {:>10.1}",
                    r.controls, r.caching, r.mean_embeddings_generated, r.mean_failed_requests
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
