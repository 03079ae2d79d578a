use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use otfuse_core::{
    ensemble_mae, evaluate_mae, fuse, load_dataset, load_model, save_model, vanilla_fuse,
    AlignmentTrace, Dataset, DatasetFormat, GcnModel,
};

use crate::cli::{Cli, Command, PairArgs};
use crate::error::{HarnessError, Result};
use crate::experiments::{self, ExperimentResult};
use crate::fixtures::{self, FixtureSpec};
use crate::report::{self, EvalRecord};
use crate::settings::{required, FileConfig, Format};

pub const DEFAULT_REPEATS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// Output was written but some runs failed.
    PartialFailure,
}

struct Context {
    seed: u64,
    repeats: usize,
    out: Option<PathBuf>,
    format: Format,
    file: FileConfig,
}

pub fn run(cli: Cli) -> Result<Outcome> {
    let file = match &cli.global.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let ctx = Context {
        seed: cli.global.seed.or(file.seed).unwrap_or(0),
        repeats: cli.global.repeats.or(file.repeats).unwrap_or(DEFAULT_REPEATS),
        out: cli.global.out.clone().or_else(|| file.out.clone()),
        format: cli.global.format.or(file.format).unwrap_or_default(),
        file,
    };
    match cli.command {
        Command::Fuse {
            pair,
            trace,
            dump_costs,
            swap,
            fusion,
        } => {
            let (a, b, data) = load_pair(&pair, &ctx.file)?;
            let out = required(ctx.out.clone(), None, "out")?;
            let config = fusion.merge(ctx.file.fusion.clone()).config(ctx.seed)?;
            let (model, anchor) = if swap.or(ctx.file.swap).unwrap_or(false) { (&b, &a) } else { (&a, &b) };
            let start = Instant::now();
            let (fused, alignment) = fuse(model, anchor, &data, &config)?;
            eprintln!("fused {} aligned layers in {:.2?}", alignment.layers.len(), start.elapsed());
            save_model(&fused, &out)?;
            let trace = trace.or_else(|| ctx.file.trace.clone()).unwrap_or_else(|| suffixed(&out, ".trace.json"));
            write_text(&trace, &(alignment.to_json() + "\n"))?;
            if let Some(dir) = dump_costs.or_else(|| ctx.file.dump_costs.clone()) {
                dump_cost_matrices(&alignment, &dir)?;
            }
            if has_targets(&data) {
                println!("mae {}", report::fmt_f64(evaluate_mae(&fused, &data)?));
            }
            Ok(Outcome::Success)
        }
        Command::Vanilla { pair, interpolation } => {
            let a = load_model(required(pair.a, ctx.file.a.clone(), "a")?)?;
            let b = load_model(required(pair.b, ctx.file.b.clone(), "b")?)?;
            let out = required(ctx.out.clone(), None, "out")?;
            let t = interpolation.or(ctx.file.fusion.interpolation).unwrap_or(0.5);
            let fused = vanilla_fuse(&a, &b, t).map_err(as_usage_if_parameter)?;
            save_model(&fused, &out)?;
            if let Some(path) = pair.data.or_else(|| ctx.file.data.clone()) {
                let data = load_data(&path)?;
                if has_targets(&data) {
                    println!("mae {}", report::fmt_f64(evaluate_mae(&fused, &data)?));
                }
            }
            Ok(Outcome::Success)
        }
        Command::Grid { pair, fusion } => {
            let (a, b, data) = load_pair(&pair, &ctx.file)?;
            let args = fusion.merge(ctx.file.fusion.clone());
            let results = experiments::grid(&a, &b, &data, &args, ctx.seed, ctx.repeats)?;
            finish_results(&results, &ctx)
        }
        Command::SweepSamples { pair, sizes, fusion } => {
            let (a, b, data) = load_pair(&pair, &ctx.file)?;
            let args = fusion.merge(ctx.file.fusion.clone());
            let sizes = if sizes.is_empty() { ctx.file.sizes.clone().unwrap_or_default() } else { sizes };
            let results = experiments::sweep_samples(&a, &b, &data, &args, &sizes, ctx.seed, ctx.repeats)?;
            finish_results(&results, &ctx)
        }
        Command::BnCompare { pair, fusion } => {
            let (a, b, data) = load_pair(&pair, &ctx.file)?;
            let args = fusion.merge(ctx.file.fusion.clone());
            let results = experiments::bn_compare(&a, &b, &data, &args, ctx.seed, ctx.repeats)?;
            finish_results(&results, &ctx)
        }
        Command::GenFixtures {
            arch,
            input_dim,
            hidden,
            count,
            noise,
        } => {
            let dir = required(ctx.out.clone(), None, "out")?;
            let f = &ctx.file;
            let defaults = FixtureSpec::default();
            let spec = FixtureSpec {
                arch: arch.or(f.arch).unwrap_or(defaults.arch),
                input_dim: input_dim.or(f.input_dim).unwrap_or(defaults.input_dim),
                hidden: hidden.or(f.hidden).unwrap_or(defaults.hidden),
                count: count.or(f.count).unwrap_or(defaults.count),
                noise: noise.or(f.noise).unwrap_or(defaults.noise),
                seed: ctx.seed,
            };
            let written = fixtures::generate(&spec, &dir)?;
            eprintln!("twin relative prediction gap {:e}", written.twin_gap);
            for path in [&written.model_a, &written.model_b, &written.permutation, &written.dataset] {
                println!("{}", path.display());
            }
            Ok(Outcome::Success)
        }
        Command::Eval { model, data } => {
            let model_path = required(model, ctx.file.model.clone(), "model")?;
            let data_path = required(data, ctx.file.data.clone(), "data")?;
            let mae = evaluate_mae(&load_model(&model_path)?, &load_data(&data_path)?)?;
            let record = EvalRecord {
                command: "eval".into(),
                models: vec![model_path.display().to_string()],
                dataset: data_path.display().to_string(),
                mae,
            };
            report::write_eval(&record, ctx.format, ctx.out.as_deref())?;
            Ok(Outcome::Success)
        }
        Command::Ensemble { models, data } => {
            let paths = if models.is_empty() { ctx.file.models.clone().unwrap_or_default() } else { models };
            if paths.is_empty() {
                return Err(HarnessError::usage("missing required argument --models"));
            }
            let data_path = required(data, ctx.file.data.clone(), "data")?;
            let loaded = paths.iter().map(load_model).collect::<otfuse_core::Result<Vec<GcnModel>>>()?;
            let mae = ensemble_mae(&loaded, &load_data(&data_path)?)?;
            let record = EvalRecord {
                command: "ensemble".into(),
                models: paths.iter().map(|p| p.display().to_string()).collect(),
                dataset: data_path.display().to_string(),
                mae,
            };
            report::write_eval(&record, ctx.format, ctx.out.as_deref())?;
            Ok(Outcome::Success)
        }
    }
}

fn as_usage_if_parameter(e: otfuse_core::Error) -> HarnessError {
    match e {
        otfuse_core::Error::InvalidParameter(m) => HarnessError::Usage(m),
        other => other.into(),
    }
}

fn load_data(path: &Path) -> Result<Dataset> {
    Ok(load_dataset(path, DatasetFormat::JsonLines)?)
}

fn load_pair(pair: &PairArgs, file: &FileConfig) -> Result<(GcnModel, GcnModel, Dataset)> {
    let a = required(pair.a.clone(), file.a.clone(), "a")?;
    let b = required(pair.b.clone(), file.b.clone(), "b")?;
    let data = required(pair.data.clone(), file.data.clone(), "data")?;
    Ok((load_model(a)?, load_model(b)?, load_data(&data)?))
}

fn has_targets(data: &Dataset) -> bool {
    data.graphs().iter().all(|g| g.target().is_some())
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

fn dump_cost_matrices(trace: &AlignmentTrace, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    for layer in &trace.layers {
        let Some(cost) = &layer.cost_matrix else { continue };
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        for row in cost.rows() {
            w.write_record(row.iter().copied().map(report::fmt_f64))?;
        }
        let bytes = w.into_inner().map_err(|e| HarnessError::io(dir, e.into_error()))?;
        let path = dir.join(format!("layer_{}.csv", layer.layer_index));
        fs::write(&path, bytes).map_err(|e| HarnessError::io(&path, e))?;
    }
    Ok(())
}

fn finish_results(results: &[ExperimentResult], ctx: &Context) -> Result<Outcome> {
    for r in results {
        let c = &r.config;
        match &r.error {
            None => eprintln!(
                "{} {}/{} samples={} capture={}: mean {:.6} (fusion {:.2?}, eval {:.2?})",
                c.experiment,
                experiments::name_of(&c.solver),
                experiments::name_of(&c.cost),
                c.sample_size,
                experiments::name_of(&c.capture),
                r.mean_mae.unwrap_or(f64::NAN),
                r.timings.fusion,
                r.timings.evaluation
            ),
            Some(e) => eprintln!(
                "{} {}/{} samples={}: FAILED: {e}",
                c.experiment,
                experiments::name_of(&c.solver),
                experiments::name_of(&c.cost),
                c.sample_size
            ),
        }
    }
    report::write_results(results, ctx.format, ctx.out.as_deref())?;
    Ok(if results.iter().any(ExperimentResult::failed) {
        Outcome::PartialFailure
    } else {
        Outcome::Success
    })
}
