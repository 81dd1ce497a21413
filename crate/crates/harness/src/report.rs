//! Report rows and the small file helpers shared by runs and sweeps.

use std::io::Write;
use std::path::Path;

use cotasim_core::metrics::{EfficiencyRecord, RepetitionReport};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::HarnessError;

/// Column order of every report table.
pub const REPORT_COLUMNS: [&str; 10] = [
    "samples",
    "arr",
    "arr_repetitive",
    "srr",
    "mrl",
    "arl",
    "p95rl",
    "tps",
    "flops",
    "savings",
];

/// One report line. Absent run-length statistics become empty fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub samples: usize,
    pub arr: f64,
    pub arr_repetitive: Option<f64>,
    pub srr: f64,
    pub mrl: Option<f64>,
    pub arl: Option<f64>,
    pub p95rl: Option<f64>,
    pub tps: f64,
    pub flops: u64,
    pub savings: f64,
}

impl ReportRow {
    pub fn new(rep: &RepetitionReport, eff: &EfficiencyRecord) -> Self {
        Self {
            samples: rep.samples,
            arr: rep.arr,
            arr_repetitive: rep.arr_repetitive,
            srr: rep.srr,
            mrl: rep.mrl,
            arl: rep.arl,
            p95rl: rep.p95rl,
            tps: eff.tokens_per_second,
            flops: eff.flop_estimate,
            savings: eff.recompute_savings,
        }
    }

    pub fn fields(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        vec![
            self.samples.to_string(),
            self.arr.to_string(),
            opt(self.arr_repetitive),
            self.srr.to_string(),
            opt(self.mrl),
            opt(self.arl),
            opt(self.p95rl),
            self.tps.to_string(),
            self.flops.to_string(),
            self.savings.to_string(),
        ]
    }
}

pub fn write_report_csv(path: &Path, rows: &[ReportRow]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(REPORT_COLUMNS)?;
    for row in rows {
        w.write_record(row.fields())?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))?;
    Ok(())
}

pub fn read_report_csv(path: &Path) -> Result<Vec<ReportRow>, HarnessError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let get = |i: usize| rec.get(i).unwrap_or("");
        let num = |i: usize| -> Result<f64, HarnessError> {
            get(i).parse().map_err(|_| {
                HarnessError::Malformed(format!("column {} = {:?}", REPORT_COLUMNS[i], get(i)))
            })
        };
        let opt = |i: usize| -> Result<Option<f64>, HarnessError> {
            if get(i).is_empty() {
                Ok(None)
            } else {
                num(i).map(Some)
            }
        };
        rows.push(ReportRow {
            samples: num(0)? as usize,
            arr: num(1)?,
            arr_repetitive: opt(2)?,
            srr: num(3)?,
            mrl: opt(4)?,
            arl: opt(5)?,
            p95rl: opt(6)?,
            tps: num(7)?,
            flops: num(8)? as u64,
            savings: num(9)?,
        });
    }
    Ok(rows)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    let mut f = std::fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
    f.write_all(bytes).map_err(|e| HarnessError::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub name: String,
    pub sha256: String,
    pub bytes: u64,
}

pub fn digest_file(dir: &Path, name: &str) -> Result<FileDigest, HarnessError> {
    let path = dir.join(name);
    let bytes = std::fs::read(&path).map_err(|e| HarnessError::io(&path, e))?;
    Ok(FileDigest {
        name: name.to_string(),
        sha256: sha256_hex(&bytes),
        bytes: bytes.len() as u64,
    })
}
