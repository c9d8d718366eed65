//! `lpd`: dataset generation, classical and learned reconstruction, training
//! and comparison tables from the command line.

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use lpd_core::fbp::Filter;
use lpd_core::lpd::{InitMode, ModelKind};
use lpd_core::phantom::NoiseModel;
use lpd_core::projector::OpMode;

mod commands;
mod io;

#[derive(Parser, Debug)]
#[command(name = "lpd", version, about = "Tomographic reconstruction toolkit")]
pub struct Cli {
    /// Seed for phantoms, noise, initialization and batch sampling.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, global = true, value_enum, default_value_t = Precision::F64)]
    pub precision: Precision,
    /// Geometry JSON; defaults to the dataset's or a 64×64, 30-angle parallel beam.
    #[arg(long, global = true)]
    pub geometry: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Display window of PNG previews (default: image min and max).
    #[arg(long, global = true, num_args = 2, value_names = ["LO", "HI"], allow_negative_numbers = true)]
    pub window: Option<Vec<f64>>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum NoiseKindArg {
    None,
    Gaussian,
    Poisson,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OpModeArg {
    Linear,
    BeerLambert,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum InitArg {
    Zero,
    PseudoInverse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Fbp,
    Tv,
    Learned,
}

#[derive(Args, Debug, Clone)]
pub struct NoiseArgs {
    #[arg(long, value_enum, default_value_t = NoiseKindArg::Gaussian)]
    pub noise: NoiseKindArg,
    /// Relative standard deviation (gaussian) or photon count (poisson).
    #[arg(long, default_value_t = 0.05)]
    pub noise_level: f64,
}

impl NoiseArgs {
    pub fn model(&self, seed: u64) -> Option<NoiseModel> {
        match self.noise {
            NoiseKindArg::None => None,
            NoiseKindArg::Gaussian => Some(NoiseModel::gaussian(self.noise_level, seed)),
            NoiseKindArg::Poisson => Some(NoiseModel::poisson(self.noise_level, seed)),
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct OpArgs {
    #[arg(long, value_enum, default_value_t = OpModeArg::Linear)]
    pub op_mode: OpModeArg,
    /// Attenuation scale of the Beer-Lambert model.
    #[arg(long, default_value_t = 0.2)]
    pub mu: f64,
}

impl OpArgs {
    pub fn mode(&self) -> OpMode {
        match self.op_mode {
            OpModeArg::Linear => OpMode::Linear,
            OpModeArg::BeerLambert => OpMode::BeerLambert { mu: self.mu },
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct TvArgs {
    #[arg(long, default_value_t = 1e-3)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1000)]
    pub iterations: usize,
    /// Dual step; defaults to 0.99/‖K‖.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Primal step; defaults to 0.99/‖K‖.
    #[arg(long)]
    pub tau: Option<f64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Random-ellipse phantoms and simulated data as a dataset directory.
    GenData {
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[command(flatten)]
        noise: NoiseArgs,
        #[command(flatten)]
        op: OpArgs,
    },
    /// Modified Shepp-Logan phantom on the geometry's grid.
    SheppLogan,
    /// Data of a phantom TNSR file.
    Simulate {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        noise: NoiseArgs,
        #[command(flatten)]
        op: OpArgs,
    },
    /// Filtered back-projection of a sinogram TNSR file.
    Fbp {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "hann")]
        filter: Filter,
        #[arg(long, default_value_t = 1.0)]
        bandwidth: f64,
        /// Ground truth for PSNR/SSIM.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// TV-regularized reconstruction with PDHG.
    Tv {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        tv: TvArgs,
        #[command(flatten)]
        op: OpArgs,
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Trains a learned scheme on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Validation dataset; otherwise the last `--val-count` samples are held out.
        #[arg(long)]
        val_data: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        val_count: usize,
        #[arg(long, default_value = "learned-primal-dual")]
        model: ModelKind,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long, default_value_t = 5)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-3)]
        eta0: f64,
        #[arg(long, default_value_t = 1.0)]
        clip_norm: f64,
        #[arg(long, default_value_t = 10)]
        iterations: usize,
        #[arg(long, default_value_t = 32)]
        hidden: usize,
        #[arg(long, default_value_t = 5)]
        n_primal: usize,
        #[arg(long, default_value_t = 5)]
        n_dual: usize,
        #[arg(long)]
        share_weights: bool,
        #[arg(long, value_enum)]
        init: Option<InitArg>,
        #[arg(long, default_value_t = 100)]
        val_interval: usize,
        #[arg(long, default_value_t = 0)]
        checkpoint_interval: usize,
    },
    /// Learned reconstruction of a sinogram TNSR file.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Per-sample PSNR/SSIM of one method on a dataset.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long, required_if_eq("method", "learned"))]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "hann")]
        filter: Filter,
        #[arg(long, default_value_t = 1.0)]
        bandwidth: f64,
        #[command(flatten)]
        tv: TvArgs,
    },
    /// Comparison table of FBP, TV and trained checkpoints on a dataset.
    Compare {
        #[arg(long)]
        dataset: PathBuf,
        /// Learned methods as NAME=DIR.
        #[arg(long = "checkpoint", value_parser = parse_named)]
        checkpoints: Vec<(String, PathBuf)>,
        /// Dataset on which FBP bandwidth and TV λ are tuned; otherwise the given values are used.
        #[arg(long)]
        tune: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        bandwidth: f64,
        #[command(flatten)]
        tv: TvArgs,
    },
}

fn parse_named(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, dir)) if !name.is_empty() && !dir.is_empty() => Ok((name.to_string(), PathBuf::from(dir))),
        _ => Err(format!("expected NAME=DIR, got {s:?}")),
    }
}

impl InitArg {
    pub fn mode(self) -> InitMode {
        match self {
            InitArg::Zero => InitMode::Zero,
            InitArg::PseudoInverse => InitMode::PseudoInverse,
        }
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.precision {
        Precision::F32 => commands::run::<f32>(&cli),
        Precision::F64 => commands::run::<f64>(&cli),
    }
}
