use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use empnn::fields::FieldKind;
use empnn::train::{LossSpec, Task};

use crate::config::{parse_field, parse_loss, parse_task};

/// Lattice deformation with periodic equivariant message passing.
#[derive(Debug, Parser)]
#[command(name = "empnn", version)]
pub struct Cli {
    /// Worker threads (default: all logical cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic train/val/test JSON-lines files (80/10/10 split).
    Gen(GenArgs),
    /// Train a model and write its checkpoint and loss curve.
    Train(Box<TrainArgs>),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Run the randomised property suites.
    Check(CheckArgs),
    /// Summarise a material and its neighbour graph.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FamilyArg {
    Cubic,
    Orthorhombic,
    Triclinic,
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    Ff,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Denoise,
    Reconstruct,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, value_enum, default_value = "mixed")]
    pub family: FamilyArg,
    /// Number of materials across all three splits.
    #[arg(long)]
    pub n: usize,
    /// Seed for the random draws.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory with train.jsonl and val.jsonl.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for checkpoint.json and curve.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Optimiser steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// param-mae, param-mse, rho-mae, rho-mse or rho-riemann.
    #[arg(long, value_parser = parse_loss)]
    pub loss: Option<LossSpec>,
    /// Scale of the random lattice deformations.
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Seed for initialisation, batch order and noise.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Global gradient-norm bound.
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// Steps between validation passes.
    #[arg(long)]
    pub val_every: Option<usize>,
    /// denoise or reconstruct.
    #[arg(long, value_parser = parse_task)]
    pub task: Option<Task>,
    /// Train the invariant feed-forward baseline instead.
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
    /// Comma-separated vector-field families.
    #[arg(long, value_delimiter = ',', value_parser = parse_field)]
    pub fields: Option<Vec<FieldKind>>,
    /// Symmetrise every generator.
    #[arg(long)]
    pub symmetrize: bool,
    /// Node feature width.
    #[arg(long)]
    pub feature_dim: Option<usize>,
    /// Radial basis functions per distance.
    #[arg(long)]
    pub rbf_bins: Option<usize>,
    /// Radial basis spacing and width in Å.
    #[arg(long)]
    pub rbf_delta: Option<f64>,
    /// Message-passing layers before the first deformation.
    #[arg(long)]
    pub plain_layers: Option<usize>,
    /// Layers that deform the lattice.
    #[arg(long)]
    pub deform_layers: Option<usize>,
    /// Nearest neighbours per atom.
    #[arg(long)]
    pub knn: Option<usize>,
    /// Bound of the sigmoid-scaled deformation weights.
    #[arg(long, conflicts_with = "unbounded")]
    pub weight_limit: Option<f64>,
    /// Use raw, unbounded deformation weights.
    #[arg(long)]
    pub unbounded: bool,
    /// Step size of each lattice update.
    #[arg(long)]
    pub deformation_step: Option<f64>,
    /// Wrap out-of-range fractional coordinates instead of rejecting them.
    #[arg(long)]
    pub wrap: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A JSON-lines file, or a directory whose test.jsonl is used.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "denoise")]
    pub mode: ModeArg,
    /// Scale of the random lattice deformations.
    #[arg(long, default_value_t = 0.1)]
    pub sigma: f64,
    /// Seed for the random draws.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Expect a feed-forward baseline checkpoint.
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
    /// Directory for metrics.csv, density.csv and aggregate.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Wrap out-of-range fractional coordinates instead of rejecting them.
    #[arg(long)]
    pub wrap: bool,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// Suites to run (default: all).
    #[arg(long)]
    pub suite: Vec<String>,
    /// Trials per suite (default: each suite's own count).
    #[arg(long)]
    pub trials: Option<usize>,
    /// Seed for the random draws.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// A JSON-lines dataset file.
    #[arg(long)]
    pub data: PathBuf,
    /// Record to inspect (0-based).
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Nearest neighbours per atom.
    #[arg(long, default_value_t = 8, conflicts_with = "cutoff")]
    pub knn: usize,
    /// Use a uniform cutoff radius (Å) instead of nearest neighbours.
    #[arg(long)]
    pub cutoff: Option<f64>,
    /// Write the graph as JSON to this path.
    #[arg(long)]
    pub graph_json: Option<PathBuf>,
    /// Wrap out-of-range fractional coordinates instead of rejecting them.
    #[arg(long)]
    pub wrap: bool,
}
