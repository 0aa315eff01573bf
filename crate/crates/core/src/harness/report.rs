//! CSV and JSON output. Floats are written with Rust's `Display`, which is
//! the shortest representation that parses back to the same value.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::ExperimentConfig;
use super::run::{CycleDiagnostics, RunSummary};
use super::suite::{BetaEcdf, SweepRow};
use crate::error::{Error, Result};
use crate::loc_inflate::InflationState;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> Error + '_ {
    move |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    }
}

fn write_csv<I>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(header).map_err(csv_err(path))?;
    for row in rows {
        w.write_record(&row).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_diagnostics_csv(path: &Path, diagnostics: &[CycleDiagnostics]) -> Result<()> {
    write_csv(
        path,
        &["cycle", "rmse_a", "rmse_b", "spread", "beta", "delta_mean", "failed"],
        diagnostics.iter().map(|d| {
            vec![
                d.cycle.to_string(),
                d.rmse_a.to_string(),
                d.rmse_b.to_string(),
                d.spread.to_string(),
                d.beta.to_string(),
                d.delta_mean.to_string(),
                u8::from(d.failed).to_string(),
            ]
        }),
    )
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    write_csv(
        path,
        &[
            "param_name",
            "param_value",
            "rmse_mean",
            "rmse_std",
            "spread_mean",
            "delta_mean",
            "failures",
        ],
        rows.iter().map(|r| {
            vec![
                r.param_name.clone(),
                r.param_value.to_string(),
                r.rmse_mean.to_string(),
                r.rmse_std.to_string(),
                r.spread_mean.to_string(),
                r.delta_mean.to_string(),
                r.failures.to_string(),
            ]
        }),
    )
}

/// Streams the per-gridpoint inflation field, one `cycle,gridpoint,delta`
/// row per gridpoint and cycle.
pub struct InflationFieldWriter {
    path: PathBuf,
    writer: csv::Writer<File>,
}

impl InflationFieldWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut writer = csv::Writer::from_path(path).map_err(csv_err(path))?;
        writer
            .write_record(["cycle", "gridpoint", "delta"])
            .map_err(csv_err(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            writer,
        })
    }

    pub fn record(&mut self, cycle: usize, inflation: &InflationState) -> Result<()> {
        let cycle = cycle.to_string();
        for (q, d) in inflation.deltas().iter().enumerate() {
            self.writer
                .write_record([cycle.as_str(), &q.to_string(), &d.to_string()])
                .map_err(csv_err(&self.path))?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.writer.flush().map_err(io_err(&self.path))
    }
}

pub fn write_ecdf_csv(path: &Path, ecdf: &BetaEcdf) -> Result<()> {
    write_csv(
        path,
        &["beta", "ecdf"],
        ecdf.rows().map(|(b, f)| vec![b.to_string(), f.to_string()]),
    )
}

#[derive(Serialize)]
struct SummaryRecord<'a> {
    #[serde(flatten)]
    summary: &'a RunSummary,
    config: &'a ExperimentConfig,
}

pub fn write_summary_json(path: &Path, summary: &RunSummary, config: &ExperimentConfig) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, &SummaryRecord { summary, config })?;
    writeln!(w).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

/// Writes `<stem>.csv` and/or `<stem>.json` into `dir` and returns the paths.
pub fn emit_report(
    dir: &Path,
    stem: &str,
    summary: &RunSummary,
    diagnostics: &[CycleDiagnostics],
    config: &ExperimentConfig,
    formats: &[ReportFormat],
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();
    for format in formats {
        let path = match format {
            ReportFormat::Csv => {
                let p = dir.join(format!("{stem}.csv"));
                write_diagnostics_csv(&p, diagnostics)?;
                p
            }
            ReportFormat::Json => {
                let p = dir.join(format!("{stem}.json"));
                write_summary_json(&p, summary, config)?;
                p
            }
        };
        written.push(path);
    }
    Ok(written)
}
