//! Repeated fusion runs and the experiment grids built from them.

use std::time::{Duration, Instant};

use otfuse_core::{
    evaluate_mae, fuse, CapturePoint, CostKind, Dataset, FusionConfig, GcnModel, Solver,
};
use serde::Serialize;

use crate::error::{HarnessError, Result};
use crate::settings::FusionArgs;

/// Configuration of one result row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSnapshot {
    pub experiment: String,
    pub solver: Solver,
    pub cost: CostKind,
    pub capture: CapturePoint,
    pub sample_size: usize,
    pub epsilon: f64,
    pub rho: f64,
    pub lambda: f64,
    pub interpolation: f64,
    pub marginal_correction: bool,
    pub seed: u64,
    pub repeats: usize,
}

impl RunSnapshot {
    pub fn of(experiment: &str, config: &FusionConfig, repeats: usize) -> Self {
        RunSnapshot {
            experiment: experiment.to_owned(),
            solver: config.solver,
            cost: config.cost.kind,
            capture: config.capture_point,
            sample_size: config.sample_size,
            epsilon: config.sinkhorn.epsilon,
            rho: config.sinkhorn.rho_alpha,
            lambda: config.cost.lambda,
            interpolation: config.interpolation,
            marginal_correction: config.marginal_correction,
            seed: config.seed,
            repeats,
        }
    }

    fn sort_key(&self) -> (String, usize, String, String, String) {
        (
            self.experiment.clone(),
            self.sample_size,
            name_of(&self.capture),
            name_of(&self.solver),
            name_of(&self.cost),
        )
    }
}

/// Kebab-case name of a core enum value, as used in flags and output.
pub fn name_of<T: Serialize>(value: &T) -> String {
    match serde_json::to_value(value) {
        Ok(serde_json::Value::String(s)) => s,
        _ => String::new(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Ok,
    Failed,
}

/// Wall-clock per stage, summed over repeats. Never written to result files,
/// which must be byte-identical across reruns.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    pub fusion: Duration,
    pub evaluation: Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentResult {
    pub config: RunSnapshot,
    pub maes: Vec<f64>,
    pub mean_mae: Option<f64>,
    pub std_mae: Option<f64>,
    pub status: RunStatus,
    pub error: Option<String>,
    #[serde(skip)]
    pub timings: StageTimings,
}

/// Mean and population standard deviation; the deviation of one value is 0.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

impl ExperimentResult {
    fn finish(config: RunSnapshot, maes: Vec<f64>, error: Option<String>, timings: StageTimings) -> Self {
        let stats = if error.is_none() { mean_std(&maes) } else { None };
        ExperimentResult {
            config,
            mean_mae: stats.map(|s| s.0),
            std_mae: stats.map(|s| s.1),
            status: if error.is_none() { RunStatus::Ok } else { RunStatus::Failed },
            maes,
            error,
            timings,
        }
    }

    pub fn failed(&self) -> bool {
        self.status == RunStatus::Failed
    }
}

/// Sorts rows by configuration so output order never depends on run order.
pub fn sort_results(results: &mut [ExperimentResult]) {
    results.sort_by(|x, y| x.config.sort_key().cmp(&y.config.sort_key()));
}

/// Fuses `a` into the anchor `b` `repeats` times with seeds `seed, seed+1, ...`
/// and scores each fused model on `data`. A failing repeat fails the row.
pub fn run_repeats(
    experiment: &str,
    a: &GcnModel,
    b: &GcnModel,
    data: &Dataset,
    config: &FusionConfig,
    repeats: usize,
) -> ExperimentResult {
    let snapshot = RunSnapshot::of(experiment, config, repeats);
    let mut timings = StageTimings::default();
    let mut maes = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let mut cfg = config.clone();
        cfg.seed = config.seed.wrapping_add(r as u64);
        let start = Instant::now();
        let fused = fuse(a, b, data, &cfg);
        timings.fusion += start.elapsed();
        let start = Instant::now();
        let mae = fused.and_then(|(model, _)| evaluate_mae(&model, data));
        timings.evaluation += start.elapsed();
        match mae {
            Ok(m) => maes.push(m),
            Err(e) => return ExperimentResult::finish(snapshot, maes, Some(e.to_string()), timings),
        }
    }
    ExperimentResult::finish(snapshot, maes, None, timings)
}

fn check_repeats(repeats: usize) -> Result<()> {
    if repeats == 0 {
        return Err(HarnessError::usage("--repeats must be at least 1"));
    }
    Ok(())
}

/// {EMD, Sinkhorn} x {EFD, QE, FGW}, each with its own defaults.
pub fn grid(
    a: &GcnModel,
    b: &GcnModel,
    data: &Dataset,
    args: &FusionArgs,
    seed: u64,
    repeats: usize,
) -> Result<Vec<ExperimentResult>> {
    check_repeats(repeats)?;
    if args.solver.is_some() || args.cost.is_some() {
        return Err(HarnessError::usage("grid sets --solver and --cost per cell"));
    }
    let mut configs = Vec::new();
    for solver in [Solver::Emd, Solver::Sinkhorn] {
        for kind in [CostKind::Efd, CostKind::Qe, CostKind::Fgw] {
            configs.push(args.config_for(solver, kind, seed)?);
        }
    }
    let mut results: Vec<_> = configs
        .iter()
        .map(|c| run_repeats("grid", a, b, data, c, repeats))
        .collect();
    sort_results(&mut results);
    Ok(results)
}

/// One row per sample size, all other settings fixed.
pub fn sweep_samples(
    a: &GcnModel,
    b: &GcnModel,
    data: &Dataset,
    args: &FusionArgs,
    sizes: &[usize],
    seed: u64,
    repeats: usize,
) -> Result<Vec<ExperimentResult>> {
    check_repeats(repeats)?;
    if sizes.is_empty() {
        return Err(HarnessError::usage("--sizes needs at least one sample size"));
    }
    if sizes.contains(&0) {
        return Err(HarnessError::usage("sample sizes must be at least 1"));
    }
    let base = args.config(seed)?;
    if base.use_weight_cost {
        return Err(HarnessError::usage("the weight cost uses no samples; nothing to sweep"));
    }
    let mut results: Vec<_> = sizes
        .iter()
        .map(|&n| {
            let config = FusionConfig {
                sample_size: n,
                ..base.clone()
            };
            run_repeats("sweep-samples", a, b, data, &config, repeats)
        })
        .collect();
    sort_results(&mut results);
    Ok(results)
}

/// The configured fusion with pre-BN and with post-BN capture.
pub fn bn_compare(
    a: &GcnModel,
    b: &GcnModel,
    data: &Dataset,
    args: &FusionArgs,
    seed: u64,
    repeats: usize,
) -> Result<Vec<ExperimentResult>> {
    check_repeats(repeats)?;
    if args.capture.is_some() {
        return Err(HarnessError::usage("bn-compare sets --capture itself"));
    }
    if !a.has_batch_norm() || !b.has_batch_norm() {
        return Err(otfuse_core::Error::NoBatchNorm.into());
    }
    let base = args.config(seed)?;
    let mut results: Vec<_> = [CapturePoint::PreBn, CapturePoint::PostBn]
        .into_iter()
        .map(|capture_point| {
            let config = FusionConfig {
                capture_point,
                ..base.clone()
            };
            run_repeats("bn-compare", a, b, data, &config, repeats)
        })
        .collect();
    sort_results(&mut results);
    Ok(results)
}
