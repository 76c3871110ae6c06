//! `dsa`: data generation, decoder training, detection simulation,
//! post-processing and experiments.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use dsa_core::eval::{Method, Scenario};

fn parse_name<T: std::str::FromStr<Err = dsa_core::Error>>(s: &str) -> Result<T, String> {
    s.parse().map_err(|e: dsa_core::Error| e.to_string())
}

#[derive(Parser, Debug)]
#[command(name = "dsa", version, about = "Detection selection by analysis-by-synthesis", args_override_self = true)]
pub struct Cli {
    /// Master seed; every random stream derives from it.
    #[arg(long, global = true, env = "DSA_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for scene-level work.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub jobs: u64,
    /// key=value file of flag defaults; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Generate the pair, decoder, validation and test datasets.
    GenData(GenDataArgs),
    /// Train one decoder per class on a generated decoder dataset.
    TrainDecoder(TrainArgs),
    /// Simulate detector output for a validation or test split.
    Simulate(SimulateArgs),
    /// Run a suppression method (optionally followed by DSA) per scene.
    Postprocess(PostprocessArgs),
    /// Tune on validation, evaluate on test, write reports.
    Experiment(ExperimentArgs),
    /// Print a report CSV as a table.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Fraction of the full validation (500) and test (500) set sizes.
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    /// Appearances of each class in the two-object pair set.
    #[arg(long, default_value_t = 1000)]
    pub pairs_per_class: usize,
    /// Skip writing the pair scenes themselves (decoder images are kept).
    #[arg(long)]
    pub no_pairs: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Output directory of gen-data.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    pub epochs: u64,
    #[arg(long, default_value_t = 25)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr_decoder: f64,
    #[arg(long, default_value_t = 0.05)]
    pub lr_latent: f64,
    #[arg(long, default_value_t = 10)]
    pub latent_dim: usize,
    #[arg(long, default_value_t = 300)]
    pub hidden: usize,
    /// Leading fraction of each class's images used for training.
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    /// Train only these classes (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub classes: Vec<u32>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Output directory of gen-data.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// baseline, score_shift or label_shift.
    #[arg(long, default_value = "baseline")]
    pub profile: String,
    /// Spin every object by this many degrees first.
    #[arg(long)]
    pub rotate: Option<f64>,
    /// Crop this many pixels around the objects and enlarge back first.
    #[arg(long)]
    pub enlarge: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PostprocessArgs {
    /// Output directory of simulate.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// nms, soft-nms, diou-nms, nms+dsa or soft-nms+dsa.
    #[arg(long, value_parser = parse_name::<Method>)]
    pub method: Method,
    /// Model directory of train-decoder (DSA methods only).
    #[arg(long)]
    pub models: Option<PathBuf>,
    /// Suppression IoU threshold.
    #[arg(long, default_value_t = 0.5)]
    pub nt: f64,
    /// Keep detections scoring above this (non-DSA methods).
    #[arg(long)]
    pub threshold: Option<f64>,
    /// linear or gaussian.
    #[arg(long, default_value = "linear")]
    pub soft_method: String,
    #[arg(long, default_value_t = 0.5)]
    pub soft_sigma: f64,
    #[command(flatten)]
    pub dsa: DsaArgs,
}

#[derive(Args, Debug, Clone)]
pub struct DsaArgs {
    #[arg(long, default_value_t = 15.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0.1)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0.25)]
    pub min_objectness: f64,
    #[arg(long, default_value_t = 300)]
    pub n_iter: usize,
    #[arg(long, default_value_t = 0.15)]
    pub t0: f64,
    #[arg(long, default_value_t = 0.01)]
    pub lr_recon: f64,
    /// Optimize an in-plane rotation in every single reconstruction.
    #[arg(long)]
    pub rotation: bool,
    /// Competition pairs `source:target`, comma separated (e.g. 9:8).
    #[arg(long, value_delimiter = ',')]
    pub competition: Vec<String>,
    /// paper (carry caches across steps) or invalidate.
    #[arg(long, default_value = "paper")]
    pub cache_mode: String,
}

#[derive(Args, Debug)]
pub struct ExperimentArgs {
    /// baseline, fixed, score_shift, rotate10 or enlarge.
    #[arg(long, default_value = "baseline", value_parser = parse_name::<Scenario>)]
    pub scenario: Scenario,
    /// Output directory of gen-data; generated on the fly at --scale when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    pub scale: f64,
    /// Model directory of train-decoder.
    #[arg(long)]
    pub models: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Methods to run (comma separated); all five by default.
    #[arg(long, value_delimiter = ',', value_parser = parse_name::<Method>)]
    pub methods: Vec<Method>,
    /// Penalty grid for DSA (comma separated).
    #[arg(long, value_delimiter = ',', default_value = "10,20,30,40,50")]
    pub lambdas: Vec<f64>,
    #[arg(long, default_value_t = 0.5)]
    pub fixed_threshold: f64,
    #[command(flatten)]
    pub dsa: DsaArgs,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// A reports CSV, or an experiment output directory holding reports.csv.
    #[arg(long)]
    pub input: PathBuf,
}

fn main() -> ExitCode {
    let raw: Vec<String> = std::env::args().collect();
    let args = match config::splice(raw, &Cli::command()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
