//! Result files. CSV columns are part of the public interface; add new ones
//! at the end only.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{HarnessError, Result};
use crate::experiments::{name_of, ExperimentResult};
use crate::settings::Format;

pub const RESULT_COLUMNS: [&str; 17] = [
    "experiment",
    "solver",
    "cost",
    "capture",
    "sample_size",
    "epsilon",
    "rho",
    "lambda",
    "interpolation",
    "marginal_correction",
    "seed",
    "repeats",
    "status",
    "mean_mae",
    "std_mae",
    "maes",
    "error",
];

pub const EVAL_COLUMNS: [&str; 4] = ["command", "models", "dataset", "mae"];

/// Shortest round-trip form, exponent notation for small and large magnitudes.
pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        serde_json::to_string(&x).unwrap_or_else(|_| x.to_string())
    } else {
        x.to_string()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub fn results_csv(results: &[ExperimentResult]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(RESULT_COLUMNS)?;
    for r in results {
        let c = &r.config;
        let maes: Vec<String> = r.maes.iter().copied().map(fmt_f64).collect();
        w.write_record([
            c.experiment.clone(),
            name_of(&c.solver),
            name_of(&c.cost),
            name_of(&c.capture),
            c.sample_size.to_string(),
            fmt_f64(c.epsilon),
            fmt_f64(c.rho),
            fmt_f64(c.lambda),
            fmt_f64(c.interpolation),
            c.marginal_correction.to_string(),
            c.seed.to_string(),
            c.repeats.to_string(),
            name_of(&r.status),
            opt(r.mean_mae),
            opt(r.std_mae),
            maes.join(";"),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.into_inner().map_err(|e| HarnessError::io("<csv buffer>", e.into_error()))
}

fn json_bytes<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Writes to `out`, or stdout when absent.
pub fn emit(bytes: &[u8], out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => fs::write(path, bytes).map_err(|e| HarnessError::io(path, e)),
        None => std::io::stdout()
            .write_all(bytes)
            .map_err(|e| HarnessError::io("<stdout>", e)),
    }
}

pub fn write_results(results: &[ExperimentResult], format: Format, out: Option<&Path>) -> Result<()> {
    let bytes = match format {
        Format::Csv => results_csv(results)?,
        Format::Json => json_bytes(results)?,
    };
    emit(&bytes, out)
}

/// One evaluation result (a single model or an ensemble).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRecord {
    pub command: String,
    pub models: Vec<String>,
    pub dataset: String,
    pub mae: f64,
}

/// Appends to `out` (header only when the file is new or empty), or prints.
pub fn write_eval(record: &EvalRecord, format: Format, out: Option<&Path>) -> Result<()> {
    match format {
        Format::Json => {
            let line = serde_json::to_string(record)?;
            match out {
                Some(path) => append(path, format!("{line}\n").as_bytes()),
                None => emit(format!("{line}\n").as_bytes(), None),
            }
        }
        Format::Csv => {
            let fresh = out.is_none_or(|p| fs::metadata(p).map(|m| m.len() == 0).unwrap_or(true));
            let mut w = csv::Writer::from_writer(Vec::new());
            if fresh {
                w.write_record(EVAL_COLUMNS)?;
            }
            w.write_record([
                record.command.clone(),
                record.models.join(";"),
                record.dataset.clone(),
                fmt_f64(record.mae),
            ])?;
            let bytes = w.into_inner().map_err(|e| HarnessError::io("<csv buffer>", e.into_error()))?;
            match out {
                Some(path) => append(path, &bytes),
                None => emit(&bytes, None),
            }
        }
    }
}

fn append(path: &Path, bytes: &[u8]) -> Result<()> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|e| HarnessError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::{RunSnapshot, RunStatus, StageTimings};
    use otfuse_core::FusionConfig;

    fn row(maes: Vec<f64>) -> ExperimentResult {
        ExperimentResult {
            config: RunSnapshot::of("grid", &FusionConfig::default(), maes.len()),
            mean_mae: Some(maes.iter().sum::<f64>() / maes.len() as f64),
            std_mae: Some(0.0),
            maes,
            status: RunStatus::Ok,
            error: None,
            timings: StageTimings::default(),
        }
    }

    #[test]
    fn csv_has_header_and_one_line_per_row() {
        let bytes = results_csv(&[row(vec![0.5]), row(vec![0.25, 0.75])]).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], RESULT_COLUMNS.join(","));
        assert!(lines[1].starts_with("grid,emd,efd,post-bn,340,"));
        assert!(lines[2].contains(",ok,0.5,0.0,0.25;0.75,"));
    }

    #[test]
    fn floats_round_trip() {
        for x in [1.1829426327381042e-16, 5e-5, 0.5, 1.0, 123456.75] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(fmt_f64(1.1829426327381042e-16), "1.1829426327381042e-16");
        assert_eq!(fmt_f64(f64::INFINITY), "inf");
    }

    #[test]
    fn eval_rows_append_under_one_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eval.csv");
        let rec = EvalRecord {
            command: "eval".into(),
            models: vec!["m.json".into()],
            dataset: "d.jsonl".into(),
            mae: 0.125,
        };
        write_eval(&rec, Format::Csv, Some(&path)).unwrap();
        write_eval(&rec, Format::Csv, Some(&path)).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text, "command,models,dataset,mae\neval,m.json,d.jsonl,0.125\neval,m.json,d.jsonl,0.125\n");
    }
}
