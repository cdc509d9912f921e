// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "nplab", version, about = "Neuron pursuit, NCF ascent and saddle dynamics experiments")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub cmd: Group,
}

#[derive(Debug, Clone, Args)]
pub struct Global {
    /// JSON config for the subcommand; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Group {
    /// Neuron pursuit.
    #[command(subcommand)]
    Np(NpCmd),
    /// Constrained NCF ascent.
    #[command(subcommand)]
    Ncf(NcfCmd),
    /// Dynamics near sparse saddles.
    #[command(subcommand)]
    Saddle(SaddleCmd),
    /// First-order expansion around a saddle.
    #[command(subcommand)]
    Decomp(CheckCmd),
    /// Gradient and homogeneity oracles.
    #[command(subcommand)]
    Grad(GradCmd),
    /// Neuron pursuit against orthogonal matching pursuit.
    #[command(subcommand)]
    Omp(OmpCmd),
    /// Benchmark datasets.
    #[command(subcommand)]
    Bench(BenchCmd),
}

#[derive(Debug, Subcommand)]
pub enum NpCmd {
    Run,
    Eval {
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// `relative` or `classification`.
        #[arg(long, default_value = "relative")]
        metric: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum NcfCmd {
    Maximize,
}

#[derive(Debug, Subcommand)]
pub enum SaddleCmd {
    Simulate,
    Sumflow,
}

#[derive(Debug, Subcommand)]
pub enum CheckCmd {
    Check,
}

#[derive(Debug, Subcommand)]
pub enum GradCmd {
    Check {
        /// Number of random networks.
        #[arg(long, default_value_t = 50)]
        count: usize,
    },
}

#[derive(Debug, Subcommand)]
pub enum OmpCmd {
    Compare,
}

#[derive(Debug, Subcommand)]
pub enum BenchCmd {
    Gen,
}
