//! File formats.
//!
//! * schedule: one b-value per line (blank lines and `#` comments skipped)
//! * curves / datasets: CSV whose header names the b-values; optional
//!   leading `D,f,Dstar` label columns
//! * fit results: `index,D,f,Dstar,s0,residual,converged,iterations,error`
//! * sweep table: `method,factor,parameter,nrmse`
//! * correlation table: `stage,n,r`
//! * grid search table: `value,score,nrmse_D,nrmse_f,nrmse_Dstar,error`
//! * training history: `epoch,train_loss,val_loss`
//!
//! Every writer formats floats with their shortest round-trip
//! representation, so reruns produce byte-identical files.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{IvimError, Result};
use crate::eval::{ExperimentResult, GridSearchResult, StageCorrelation};
use crate::fit::FitResult;
use crate::model::{BValueSchedule, IvimParams, SignalCurve};
use crate::nn::TrainingHistory;
use crate::simulate::LabeledDataset;

const LABEL_COLUMNS: [&str; 3] = ["D", "f", "Dstar"];

/// Shortest round-trip text of `v`, in exponent form for very small or
/// very large magnitudes.
pub fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && a.is_finite() && !(1e-4..1e15).contains(&a) {
        format!("{v:e}")
    } else {
        v.to_string()
    }
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| IvimError::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn csv_error(path: &Path, e: csv::Error) -> IvimError {
    match e.kind() {
        csv::ErrorKind::Io(_) => match e.into_kind() {
            csv::ErrorKind::Io(io) => IvimError::io(path, io),
            _ => unreachable!(),
        },
        _ => IvimError::Format(format!("{}: {e}", path.display())),
    }
}

fn parse_f64(path: &Path, line: usize, field: &str) -> Result<f64> {
    field.parse::<f64>().map_err(|_| {
        IvimError::Format(format!("{}:{line}: '{field}' is not a number", path.display()))
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| IvimError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| IvimError::io(path, e))
}

pub fn read_schedule(path: impl AsRef<Path>) -> Result<BValueSchedule> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| IvimError::io(path, e))?;
    let mut values = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        values.push(parse_f64(path, i + 1, line)?);
    }
    BValueSchedule::new(values).map_err(|e| IvimError::Format(format!("{}: {e}", path.display())))
}

pub fn write_schedule(path: impl AsRef<Path>, schedule: &BValueSchedule) -> Result<()> {
    let mut out = String::new();
    for b in schedule.values() {
        out.push_str(&format!("{}\n", fmt_f64(*b)));
    }
    write_file(path.as_ref(), out.as_bytes())
}

/// Reads a curve or dataset CSV. Label columns are optional but must be
/// complete (`D`, `f` and `Dstar`) when present.
pub fn read_curves(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let mut reader = csv_reader(path)?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();

    let mut label_idx = [None; 3];
    let mut b_cols = Vec::new();
    for (col, name) in header.iter().enumerate() {
        if let Some(k) = LABEL_COLUMNS.iter().position(|l| *l == name) {
            label_idx[k] = Some(col);
        } else {
            let b = name.parse::<f64>().map_err(|_| {
                IvimError::Format(format!(
                    "{}: column '{name}' is neither a label nor a b-value",
                    path.display()
                ))
            })?;
            b_cols.push((col, b));
        }
    }
    let labelled = match label_idx {
        [Some(_), Some(_), Some(_)] => true,
        [None, None, None] => false,
        _ => {
            return Err(IvimError::Format(format!(
                "{}: label columns must include all of D, f, Dstar",
                path.display()
            )))
        }
    };
    let schedule = Arc::new(
        BValueSchedule::new(b_cols.iter().map(|c| c.1).collect())
            .map_err(|e| IvimError::Format(format!("{}: {e}", path.display())))?,
    );

    let mut curves = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = row + 2;
        let field = |c: usize| parse_f64(path, line, record.get(c).unwrap_or(""));
        let samples = b_cols.iter().map(|&(c, _)| field(c)).collect::<Result<Vec<_>>>()?;
        curves.push(
            SignalCurve::new(samples, Arc::clone(&schedule))
                .map_err(|e| IvimError::Format(format!("{}:{line}: {e}", path.display())))?,
        );
        if labelled {
            let v: Vec<f64> = label_idx
                .iter()
                .map(|c| field(c.unwrap()))
                .collect::<Result<_>>()?;
            labels.push(IvimParams::new(v[0], v[1], v[2]).map_err(|e| {
                IvimError::Format(format!("{}:{line}: {e}", path.display()))
            })?);
        }
    }
    LabeledDataset::new(schedule, curves, labelled.then_some(labels))
}

pub fn dataset_to_csv(dataset: &LabeledDataset) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = Vec::new();
    if dataset.labels.is_some() {
        header.extend(LABEL_COLUMNS.iter().map(|s| s.to_string()));
    }
    header.extend(dataset.schedule.values().iter().map(|b| fmt_f64(*b)));
    w.write_record(&header).unwrap();
    for (i, c) in dataset.curves.iter().enumerate() {
        let mut row: Vec<String> = Vec::with_capacity(header.len());
        if let Some(l) = &dataset.labels {
            row.extend(l[i].to_array().iter().map(|v| fmt_f64(*v)));
        }
        row.extend(c.samples().iter().map(|v| fmt_f64(*v)));
        w.write_record(&row).unwrap();
    }
    w.into_inner().expect("in-memory writer")
}

pub fn write_dataset(path: impl AsRef<Path>, dataset: &LabeledDataset) -> Result<()> {
    write_file(path.as_ref(), &dataset_to_csv(dataset))
}

/// Writes one row per input curve. Failed curves keep their row with NaN
/// estimates, `converged = false` and the error message.
pub fn write_fit_results(path: impl AsRef<Path>, rows: &[Result<FitResult>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["index", "D", "f", "Dstar", "s0", "residual", "converged", "iterations", "error"])
        .unwrap();
    for (i, r) in rows.iter().enumerate() {
        let rec: Vec<String> = match r {
            Ok(r) => vec![
                i.to_string(),
                fmt_f64(r.params.d),
                fmt_f64(r.params.f),
                fmt_f64(r.params.d_star),
                fmt_f64(r.s0_hat),
                fmt_f64(r.residual_norm),
                r.converged.to_string(),
                r.iterations.to_string(),
                String::new(),
            ],
            Err(e) => {
                let mut v = vec![i.to_string()];
                v.extend(std::iter::repeat_n("NaN".to_string(), 5));
                v.extend(["false".into(), "0".into(), e.to_string()]);
                v
            }
        };
        w.write_record(&rec).unwrap();
    }
    write_file(path.as_ref(), &w.into_inner().expect("in-memory writer"))
}

pub fn write_sweep_table(path: impl AsRef<Path>, result: &ExperimentResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "factor", "parameter", "nrmse"]).unwrap();
    for c in &result.cells {
        w.write_record([
            c.method.to_string(),
            c.factor.to_string(),
            c.parameter.to_string(),
            c.nrmse.map(fmt_f64).unwrap_or_default(),
        ])
        .unwrap();
    }
    write_file(path.as_ref(), &w.into_inner().expect("in-memory writer"))
}

pub fn write_correlation_table(path: impl AsRef<Path>, stages: &[StageCorrelation]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["stage", "n", "r"]).unwrap();
    for s in stages {
        w.write_record([
            s.stage.clone(),
            s.n.to_string(),
            s.r.map(fmt_f64).unwrap_or_default(),
        ])
        .unwrap();
    }
    write_file(path.as_ref(), &w.into_inner().expect("in-memory writer"))
}

pub fn write_grid_table(path: impl AsRef<Path>, result: &GridSearchResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["value", "score", "nrmse_D", "nrmse_f", "nrmse_Dstar", "error"])
        .unwrap();
    for c in &result.table {
        let n = c.nrmse.map(|n| n.map(fmt_f64)).unwrap_or_default();
        let [d, f, ds] = n;
        w.write_record([
            fmt_f64(c.value),
            c.score.map(fmt_f64).unwrap_or_default(),
            d,
            f,
            ds,
            c.error.clone().unwrap_or_default(),
        ])
        .unwrap();
    }
    write_file(path.as_ref(), &w.into_inner().expect("in-memory writer"))
}

pub fn write_history(path: impl AsRef<Path>, history: &TrainingHistory) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "train_loss", "val_loss"]).unwrap();
    for (e, (t, v)) in history.train_loss.iter().zip(&history.val_loss).enumerate() {
        w.write_record([e.to_string(), fmt_f64(*t), fmt_f64(*v)]).unwrap();
    }
    write_file(path.as_ref(), &w.into_inner().expect("in-memory writer"))
}

/// Reads `(id, value)` pairs. The first column is the case id; the value
/// comes from `value_column` or, if not given, the second column.
pub fn read_id_table(path: impl AsRef<Path>, value_column: Option<&str>) -> Result<Vec<(String, f64)>> {
    let path = path.as_ref();
    let mut reader = csv_reader(path)?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let col = match value_column {
        Some(name) => header.iter().position(|h| h == name).ok_or_else(|| {
            IvimError::Format(format!("{}: no column named '{name}'", path.display()))
        })?,
        None if header.len() >= 2 => 1,
        None => {
            return Err(IvimError::Format(format!(
                "{}: expected an id column and a value column",
                path.display()
            )))
        }
    };
    let mut rows = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let id = record.get(0).unwrap_or("").to_string();
        rows.push((id, parse_f64(path, row + 2, record.get(col).unwrap_or(""))?));
    }
    Ok(rows)
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| IvimError::Format(format!("cannot serialize JSON: {e}")))?;
    bytes.write_all(b"\n").unwrap();
    write_file(path.as_ref(), &bytes)
}
