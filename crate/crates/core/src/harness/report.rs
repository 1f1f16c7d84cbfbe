use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::ExperimentReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    Csv,
    JsonLines,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "jsonl" | "json-lines" => Ok(ReportFormat::JsonLines),
            _ => Err(Error::Config(format!("unknown report format {s:?} (csv, jsonl)"))),
        }
    }
}

pub const CSV_COLUMNS: [&str; 16] = [
    "method",
    "token_vf",
    "chunk_vf",
    "beta",
    "W",
    "K",
    "L",
    "N",
    "seed_count",
    "mean_gold",
    "stderr",
    "fwd_base",
    "fwd_tuned",
    "fwd_ref",
    "fwd_scorer",
    "wall_time_s",
];

/// One parsed csv row.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct CsvRow {
    pub method: String,
    pub token_vf: String,
    pub chunk_vf: String,
    pub beta: f64,
    #[serde(rename = "W")]
    pub w: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "L")]
    pub l: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub seed_count: usize,
    pub mean_gold: f64,
    pub stderr: f64,
    pub fwd_base: u64,
    pub fwd_tuned: u64,
    pub fwd_ref: u64,
    pub fwd_scorer: u64,
    pub wall_time_s: f64,
}

/// `x` with six significant digits in plain decimal notation.
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (5 - magnitude).max(0) as usize;
    let s = format!("{x:.decimals$}");
    // rounding can carry into a new leading digit (9.999995 -> 10.00000)
    let rounded: f64 = s.parse().expect("formatted float");
    if rounded != 0.0 && rounded.abs().log10().floor() as i32 > magnitude && decimals > 0 {
        return format!("{x:.prec$}", prec = decimals - 1);
    }
    s
}

fn csv_record(r: &ExperimentReport) -> Vec<String> {
    let c = &r.config;
    vec![
        r.method.name(),
        r.token_vf.as_str().into(),
        r.chunk_vf.as_str().into(),
        sig6(r.beta),
        c.beam_width.to_string(),
        c.successors.to_string(),
        c.chunk_len.to_string(),
        c.num_samples.to_string(),
        r.per_seed.len().to_string(),
        sig6(r.mean_gold),
        sig6(r.std_err),
        r.fwd_totals.base.to_string(),
        r.fwd_totals.tuned.to_string(),
        r.fwd_totals.reference.to_string(),
        r.fwd_totals.scorer.to_string(),
        sig6(r.wall_time_s),
    ]
}

/// Writes `reports` as csv (the columns of [`CSV_COLUMNS`]) or as one JSON
/// object per line carrying every report field.
pub fn emit_report(reports: &[ExperimentReport], path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::Input("no reports to write".into()));
    }
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::Input(format!("cannot write {}: {e}", path.display())))?;
    match format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(file);
            w.write_record(CSV_COLUMNS)?;
            for r in reports {
                w.write_record(csv_record(r))?;
            }
            w.flush()?;
        }
        ReportFormat::JsonLines => {
            let mut w = BufWriter::new(file);
            for r in reports {
                serde_json::to_writer(&mut w, r)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

pub fn read_report_csv(path: impl AsRef<Path>) -> Result<Vec<CsvRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
