//! CSV and JSON artifacts.
//!
//! Floats are written with Rust's shortest round-trip formatting, so reading
//! a file back reproduces every value bit for bit.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::data::LabeledDataset;
use crate::distill::HistoryRow;
use crate::error::{Error, Result};
use crate::eval::{CurvePoint, ExitDecision};
use crate::tensor::Mat;

pub const HISTORY_HEADER: [&str; 7] = ["round", "label", "edge_gamma", "z", "eta", "class_r", "clamp_count"];
pub const CURVE_HEADER: [&str; 3] = ["prefix_k", "cum_flops_fraction", "accuracy"];
pub const EXIT_HEADER: [&str; 3] = ["prediction", "members_evaluated", "flops_spent"];

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(file))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: format!("{other:?}"),
        },
    }
}

fn write_rows(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Header and records of a CSV file with every field parsed by `parse`.
fn read_table<T>(path: &Path, parse: impl Fn(&str) -> Option<T>) -> Result<(Vec<String>, Vec<Vec<T>>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header: Vec<String> = r
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(str::to_owned)
        .collect();
    let mut rows = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = k + 2;
        let row = rec
            .iter()
            .map(|field| {
                parse(field).ok_or_else(|| Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    msg: format!("cannot parse `{field}`"),
                })
            })
            .collect::<Result<Vec<T>>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}

fn expect_header(path: &Path, found: &[String], expected: &[String]) -> Result<()> {
    if found != expected {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("expected header {}, found {}", expected.join(","), found.join(",")),
        });
    }
    Ok(())
}

fn numbered(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|k| format!("{prefix}{k}")).collect()
}

fn parse_f64(s: &str) -> Option<f64> {
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

pub fn write_dataset(path: &Path, ds: &LabeledDataset) -> Result<()> {
    let mut header = numbered("x", ds.dim());
    header.push("label".into());
    let rows = (0..ds.len()).map(|i| {
        let mut row: Vec<String> = ds.x.row(i).iter().map(f64::to_string).collect();
        row.push(ds.labels[i].to_string());
        row
    });
    write_rows(path, &header, rows)
}

/// Read a dataset file; `classes` is taken from the generator metadata.
pub fn read_dataset(path: &Path, classes: usize) -> Result<LabeledDataset> {
    let (header, rows) = read_table(path, parse_f64)?;
    let d = header.len().checked_sub(1).ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        msg: "empty header".into(),
    })?;
    let mut expected = numbered("x", d);
    expected.push("label".into());
    expect_header(path, &header, &expected)?;
    let mut x = Vec::with_capacity(rows.len() * d);
    let mut labels = Vec::with_capacity(rows.len());
    for (k, row) in rows.iter().enumerate() {
        let y = row[d];
        if y < 0.0 || y.fract() != 0.0 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: k + 2,
                msg: format!("label `{y}` is not a class index"),
            });
        }
        x.extend_from_slice(&row[..d]);
        labels.push(y as usize);
    }
    LabeledDataset::new(Mat::from_vec(rows.len(), d, x)?, labels, classes)
}

pub fn write_logits(path: &Path, logits: &Mat) -> Result<()> {
    let header = numbered("l", logits.cols());
    let rows = (0..logits.rows()).map(|i| logits.row(i).iter().map(f64::to_string).collect());
    write_rows(path, &header, rows)
}

pub fn read_logits(path: &Path) -> Result<Mat> {
    let (header, rows) = read_table(path, parse_f64)?;
    expect_header(path, &header, &numbered("l", header.len()))?;
    let cols = header.len();
    Mat::from_vec(rows.len(), cols, rows.into_iter().flatten().collect())
}

pub fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let header: Vec<String> = HISTORY_HEADER.iter().map(|s| s.to_string()).collect();
    let rows = rows.iter().map(|r| {
        vec![
            r.round.to_string(),
            r.label.to_string(),
            r.edge_gamma.to_string(),
            r.z.to_string(),
            r.eta.to_string(),
            r.class_r.to_string(),
            r.clamp_count.to_string(),
        ]
    });
    write_rows(path, &header, rows)
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRow>> {
    let (header, rows) = read_table(path, |s| Some(s.to_owned()))?;
    let expected: Vec<String> = HISTORY_HEADER.iter().map(|s| s.to_string()).collect();
    expect_header(path, &header, &expected)?;
    rows.iter()
        .enumerate()
        .map(|(k, f)| {
            let bad = |what: &str| Error::Parse {
                path: path.to_path_buf(),
                line: k + 2,
                msg: format!("bad {what}"),
            };
            let count = |i: usize| f[i].parse::<usize>().map_err(|_| bad(HISTORY_HEADER[i]));
            let float = |i: usize| parse_f64(&f[i]).ok_or_else(|| bad(HISTORY_HEADER[i]));
            Ok(HistoryRow {
                round: count(0)?,
                label: count(1)?,
                edge_gamma: float(2)?,
                z: float(3)?,
                eta: float(4)?,
                class_r: count(5)?,
                clamp_count: count(6)?,
            })
        })
        .collect()
}

pub fn write_curve(path: &Path, points: &[CurvePoint]) -> Result<()> {
    let header: Vec<String> = CURVE_HEADER.iter().map(|s| s.to_string()).collect();
    let rows = points.iter().map(|p| {
        vec![
            p.prefix_k.to_string(),
            p.cum_flops_fraction.to_string(),
            p.accuracy.to_string(),
        ]
    });
    write_rows(path, &header, rows)
}

pub fn write_exits(path: &Path, decisions: &[ExitDecision]) -> Result<()> {
    let header: Vec<String> = EXIT_HEADER.iter().map(|s| s.to_string()).collect();
    let rows = decisions.iter().map(|d| {
        vec![
            d.prediction.to_string(),
            d.members_evaluated.to_string(),
            d.flops_spent.to_string(),
        ]
    });
    write_rows(path, &header, rows)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}
