//! Flag values and the optional TOML config file. Every flag has a file key
//! of the same kebab-case name; fusion flags live under a `[fusion]` table.
//! Flags win over the file, the file wins over built-in defaults.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use otfuse_core::fusion::DEFAULT_FGW_SAMPLE_SIZE;
use otfuse_core::{
    Aggregation, CapturePoint, CostKind, CostNormalization, EfdVariant, FusionConfig, Solver,
    StructureKind,
};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::error::{HarnessError, Result};

/// Parses a kebab-case name into any of the core's serde enums.
pub fn kebab<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_owned()))
        .map_err(|_| format!("unrecognized value '{s}'"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchKind {
    /// Two graph convolutions with batch norm, two hidden dense layers.
    #[default]
    Gcn,
    /// Graph-free dense network on single-vertex graphs.
    Mlp,
    /// Embedding, four graph convolutions of width 145, 145-72-36-1 readout.
    Zinc,
}

/// Options shared by every command that runs a fusion.
#[derive(Debug, Clone, Default, PartialEq, Args, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct FusionArgs {
    /// Transport solver: emd | sinkhorn [default: emd]
    #[arg(long, value_parser = kebab::<Solver>)]
    pub solver: Option<Solver>,
    /// Neuron cost: efd | qe | fgw | weight [default: efd]
    #[arg(long, value_parser = kebab::<CostKind>)]
    pub cost: Option<CostKind>,
    /// Graphs sampled for activation costs [default: 340]
    #[arg(long)]
    pub samples: Option<usize>,
    /// Sample size for the fgw cost, whose pairwise problems are expensive [default: 2]
    #[arg(long)]
    pub fgw_samples: Option<usize>,
    /// Smoothness weight of the efd and qe costs [default: 0.2]
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Entropic strength for sinkhorn [default: 5e-4 for efd, 5e-5 for qe and fgw]
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// KL marginal penalty on both sides for sinkhorn [default: 1]
    #[arg(long)]
    pub rho: Option<f64>,
    /// Iteration cap for sinkhorn at the target epsilon [default: 10000]
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Where activations are captured: pre-bn | post-bn [default: post-bn]
    #[arg(long, value_parser = kebab::<CapturePoint>)]
    pub capture: Option<CapturePoint>,
    /// Weight on the anchor model [default: 0.5]
    #[arg(long)]
    pub interpolation: Option<f64>,
    /// Cost rescaling before sinkhorn: none | max | mean [default: none]
    #[arg(long, value_parser = kebab::<CostNormalization>)]
    pub normalize_costs: Option<CostNormalization>,
    /// Divide by the plan's column sums instead of uniform weights
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub marginal_correction: Option<bool>,
    /// Round sinkhorn plans to the nearest permutation
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub round_plans: Option<bool>,
    /// efd vertex term: vertex-sum | edge-sum [default: vertex-sum]
    #[arg(long, value_parser = kebab::<EfdVariant>)]
    pub efd_variant: Option<EfdVariant>,
    /// How per-graph costs combine: matched | all-pairs [default: matched]
    #[arg(long, value_parser = kebab::<Aggregation>)]
    pub aggregation: Option<Aggregation>,
    /// fgw structure matrix: shortest-path | adjacency [default: shortest-path]
    #[arg(long, value_parser = kebab::<StructureKind>)]
    pub structure: Option<StructureKind>,
    /// fgw weight on the feature term [default: 0.5]
    #[arg(long)]
    pub trade_off: Option<f64>,
}

impl FusionArgs {
    /// Field-wise `self.or(file)`.
    pub fn merge(self, file: FusionArgs) -> FusionArgs {
        FusionArgs {
            solver: self.solver.or(file.solver),
            cost: self.cost.or(file.cost),
            samples: self.samples.or(file.samples),
            fgw_samples: self.fgw_samples.or(file.fgw_samples),
            lambda: self.lambda.or(file.lambda),
            epsilon: self.epsilon.or(file.epsilon),
            rho: self.rho.or(file.rho),
            max_iters: self.max_iters.or(file.max_iters),
            capture: self.capture.or(file.capture),
            interpolation: self.interpolation.or(file.interpolation),
            normalize_costs: self.normalize_costs.or(file.normalize_costs),
            marginal_correction: self.marginal_correction.or(file.marginal_correction),
            round_plans: self.round_plans.or(file.round_plans),
            efd_variant: self.efd_variant.or(file.efd_variant),
            aggregation: self.aggregation.or(file.aggregation),
            structure: self.structure.or(file.structure),
            trade_off: self.trade_off.or(file.trade_off),
        }
    }

    /// Builds a validated config for the solver and cost given on the command line.
    pub fn config(&self, seed: u64) -> Result<FusionConfig> {
        self.config_for(
            self.solver.unwrap_or(Solver::Emd),
            self.cost.unwrap_or(CostKind::Efd),
            seed,
        )
    }

    /// Builds a validated config for an explicit solver and cost, starting
    /// from their defaults and applying every given override.
    pub fn config_for(&self, solver: Solver, kind: CostKind, seed: u64) -> Result<FusionConfig> {
        let mut config = FusionConfig::new(solver, kind);
        config.seed = seed;
        config.sample_size = if kind == CostKind::Fgw {
            self.fgw_samples.unwrap_or(DEFAULT_FGW_SAMPLE_SIZE)
        } else {
            self.samples.unwrap_or(config.sample_size)
        };
        if let Some(lambda) = self.lambda {
            config.cost.lambda = lambda;
        }
        if let Some(v) = self.efd_variant {
            config.cost.efd_variant = v;
        }
        if let Some(v) = self.aggregation {
            config.cost.aggregation = v;
        }
        if let Some(fgw) = config.cost.fgw.as_mut() {
            if let Some(s) = self.structure {
                fgw.structure = s;
            }
            if let Some(t) = self.trade_off {
                fgw.trade_off = t;
            }
        }
        if let Some(eps) = self.epsilon {
            config.sinkhorn.epsilon = eps;
        }
        if let Some(rho) = self.rho {
            config.sinkhorn.rho_alpha = rho;
            config.sinkhorn.rho_beta = rho;
        }
        if let Some(n) = self.max_iters {
            config.sinkhorn.max_iters = n;
        }
        if let Some(c) = self.capture {
            config.capture_point = c;
        }
        if let Some(t) = self.interpolation {
            config.interpolation = t;
        }
        if let Some(n) = self.normalize_costs {
            config.cost_normalization = n;
        }
        config.marginal_correction = self.marginal_correction.unwrap_or(false);
        config.round_plans = self.round_plans.unwrap_or(false);
        config.validate().map_err(|e| HarnessError::usage(e.to_string()))?;
        Ok(config)
    }
}

/// Contents of `--config`. Keys mirror the flags.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub repeats: Option<usize>,
    pub out: Option<PathBuf>,
    pub format: Option<Format>,
    pub a: Option<PathBuf>,
    pub b: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub models: Option<Vec<PathBuf>>,
    pub trace: Option<PathBuf>,
    pub dump_costs: Option<PathBuf>,
    pub swap: Option<bool>,
    pub sizes: Option<Vec<usize>>,
    pub arch: Option<ArchKind>,
    pub input_dim: Option<usize>,
    pub hidden: Option<usize>,
    pub count: Option<usize>,
    pub noise: Option<f64>,
    pub fusion: FusionArgs,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<FileConfig> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        toml::from_str(&text).map_err(|e| HarnessError::Config {
            path: path.to_owned(),
            message: e.to_string(),
        })
    }
}

/// `value` from the flag or the file, else a usage error naming the flag.
pub fn required<T>(flag: Option<T>, file: Option<T>, name: &str) -> Result<T> {
    flag.or(file)
        .ok_or_else(|| HarnessError::usage(format!("missing required argument --{name}")))
}
