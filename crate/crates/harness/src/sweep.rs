//! Cartesian sweeps over dotted config keys.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{from_value, set_dotted, ExperimentConfig, SweepConfig};
use crate::report::{write_file, ReportRow, REPORT_COLUMNS};
use crate::run::run;
use crate::HarnessError;

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub index: usize,
    pub assignments: Vec<(String, toml::Value)>,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub point: usize,
    pub values: Vec<String>,
    pub report: ReportRow,
    pub complete: bool,
}

pub fn point_dir_name(index: usize) -> String {
    format!("point-{index:03}")
}

fn show(value: &toml::Value) -> String {
    match value {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Expands the grid, first axis slowest. Every point is validated before
/// anything runs; an unknown key fails here.
pub fn expand(
    config: &ExperimentConfig,
    base: Option<&Path>,
) -> Result<Vec<SweepPoint>, HarnessError> {
    let axes = &config.sweep.axes;
    let count = axes
        .iter()
        .try_fold(1usize, |acc, a| acc.checked_mul(a.values.len()))
        .unwrap_or(usize::MAX);
    if count > config.sweep.max_points {
        return Err(HarnessError::SweepTooLarge {
            points: count,
            max: config.sweep.max_points,
        });
    }
    let mut template = config.clone();
    template.sweep = SweepConfig::default();
    let base_doc =
        toml::Value::try_from(&template).map_err(|e| HarnessError::Config(e.to_string()))?;
    let mut points = Vec::with_capacity(count);
    for index in 0..count {
        let mut rem = index;
        let mut digits = vec![0; axes.len()];
        for (d, axis) in digits.iter_mut().zip(axes).rev() {
            *d = rem % axis.values.len();
            rem /= axis.values.len();
        }
        let mut doc = base_doc.clone();
        let mut assignments = Vec::with_capacity(axes.len());
        for (axis, &d) in axes.iter().zip(&digits) {
            let value = axis.values[d].clone();
            set_dotted(&mut doc, &axis.key, value.clone())?;
            assignments.push((axis.key.clone(), value));
        }
        let cfg = from_value(doc)
            .map_err(|e| HarnessError::Config(format!("sweep point {index}: {e}")))?;
        cfg.validate(base)
            .map_err(|e| HarnessError::Config(format!("sweep point {index}: {e}")))?;
        points.push(SweepPoint {
            index,
            assignments,
            config: cfg,
        });
    }
    Ok(points)
}

/// Runs every point into `out_dir/point-NNN` and writes `sweep.csv`.
pub fn sweep(
    config: &ExperimentConfig,
    base: Option<&Path>,
    out_dir: &Path,
) -> Result<Vec<SweepRow>, HarnessError> {
    let points = expand(config, base)?;
    std::fs::create_dir_all(out_dir).map_err(|e| HarnessError::io(out_dir, e))?;
    let mut rows = Vec::with_capacity(points.len());
    for p in &points {
        let manifest = run(&p.config, base, &out_dir.join(point_dir_name(p.index)))?;
        rows.push(SweepRow {
            point: p.index,
            values: p.assignments.iter().map(|(_, v)| show(v)).collect(),
            report: manifest.report_row(),
            complete: manifest.complete,
        });
    }
    let path = out_dir.join("sweep.csv");
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["point".to_string()];
    header.extend(config.sweep.axes.iter().map(|a| a.key.clone()));
    header.extend(REPORT_COLUMNS.iter().map(|c| c.to_string()));
    header.push("complete".into());
    w.write_record(&header)?;
    for row in &rows {
        let mut rec = vec![row.point.to_string()];
        rec.extend(row.values.iter().cloned());
        rec.extend(row.report.fields());
        rec.push(row.complete.to_string());
        w.write_record(&rec)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| HarnessError::Malformed(e.to_string()))?;
    write_file(&path, &bytes)?;
    Ok(rows)
}
