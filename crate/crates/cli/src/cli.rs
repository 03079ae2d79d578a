use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::settings::{kebab, ArchKind, Format, FusionArgs};

#[derive(Debug, Parser)]
#[command(name = "otfuse", version, about = "Optimal-transport fusion of graph neural networks")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// Base seed; repeat r uses seed + r [default: 0]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Runs per configuration [default: 5]
    #[arg(long, global = true)]
    pub repeats: Option<usize>,
    /// Output file (fused model for fuse and vanilla, directory for gen-fixtures)
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Result format: csv | json [default: csv]
    #[arg(long, global = true, value_parser = kebab::<Format>)]
    pub format: Option<Format>,
    /// TOML file whose keys mirror the flags; flags take precedence
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct PairArgs {
    /// Model aligned onto the anchor
    #[arg(long)]
    pub a: Option<PathBuf>,
    /// Anchor model
    #[arg(long)]
    pub b: Option<PathBuf>,
    /// Dataset (JSON lines) used for sampling and scoring
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fuse model A into anchor B and write the fused model and alignment trace
    Fuse {
        #[command(flatten)]
        pair: PairArgs,
        /// Trace report path [default: <out>.trace.json]
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Directory for one CSV cost matrix per aligned layer
        #[arg(long)]
        dump_costs: Option<PathBuf>,
        /// Use A as the anchor instead of B
        #[arg(long, num_args = 0..=1, default_missing_value = "true")]
        swap: Option<bool>,
        #[command(flatten)]
        fusion: FusionArgs,
    },
    /// Average parameters without alignment
    Vanilla {
        #[command(flatten)]
        pair: PairArgs,
        /// Weight on the anchor B [default: 0.5]
        #[arg(long)]
        interpolation: Option<f64>,
    },
    /// Every solver and cost combination, each with its own defaults
    Grid {
        #[command(flatten)]
        pair: PairArgs,
        #[command(flatten)]
        fusion: FusionArgs,
    },
    /// MAE as a function of the fusion sample size
    SweepSamples {
        #[command(flatten)]
        pair: PairArgs,
        /// Comma-separated sample sizes
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
        #[command(flatten)]
        fusion: FusionArgs,
    },
    /// The same fusion with pre-BN and post-BN activations
    BnCompare {
        #[command(flatten)]
        pair: PairArgs,
        #[command(flatten)]
        fusion: FusionArgs,
    },
    /// Write a random model, its permuted twin and a labelled dataset
    GenFixtures {
        /// gcn | mlp | zinc [default: gcn]
        #[arg(long, value_parser = kebab::<ArchKind>)]
        arch: Option<ArchKind>,
        /// Input feature width [default: 8]
        #[arg(long)]
        input_dim: Option<usize>,
        /// Hidden width [default: 16]
        #[arg(long)]
        hidden: Option<usize>,
        /// Number of graphs [default: 500]
        #[arg(long)]
        count: Option<usize>,
        /// Relative weight noise applied to the twin [default: 0]
        #[arg(long)]
        noise: Option<f64>,
    },
    /// MAE of one model
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// MAE of the averaged predictions of several models
    Ensemble {
        /// Comma-separated model files
        #[arg(long, value_delimiter = ',')]
        models: Vec<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}
