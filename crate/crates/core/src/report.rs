//! Run reports and their CSV/JSON serialisation.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One logged step of one arm. `samples` and `function_evals` count the work
/// done since the previous record of the same arm, so summing a column over
/// an arm gives its total cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub arm: String,
    pub step: u64,
    pub objective: f64,
    pub metric: Option<f64>,
    pub grad_variance: Option<f64>,
    pub samples: u64,
    pub function_evals: u64,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArmStatus {
    Completed,
    Diverged,
    NotApplicable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub name: String,
    pub estimator: String,
    pub status: ArmStatus,
    pub message: Option<String>,
    pub final_objective: Option<f64>,
    pub final_metric: Option<f64>,
    pub samples_drawn: u64,
    pub function_evals: u64,
    pub bias_norm: Option<f64>,
    pub bias_band: Option<f64>,
    pub variance_sum: Option<f64>,
}

impl ArmSummary {
    pub fn new(name: &str, estimator: &str) -> Self {
        Self {
            name: name.to_string(),
            estimator: estimator.to_string(),
            status: ArmStatus::Completed,
            message: None,
            final_objective: None,
            final_metric: None,
            samples_drawn: 0,
            function_evals: 0,
            bias_norm: None,
            bias_band: None,
            variance_sum: None,
        }
    }
}

/// The records and summary produced by one arm.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmRun {
    pub summary: ArmSummary,
    pub steps: Vec<StepRecord>,
}

impl ArmRun {
    pub fn new(name: &str, estimator: &str) -> Self {
        Self {
            summary: ArmSummary::new(name, estimator),
            steps: Vec::new(),
        }
    }

    pub fn push(&mut self, rec: StepRecord) {
        self.summary.samples_drawn += rec.samples;
        self.summary.function_evals += rec.function_evals;
        self.summary.final_objective = Some(rec.objective);
        if rec.metric.is_some() {
            self.summary.final_metric = rec.metric;
        }
        self.steps.push(rec);
    }

    /// Marks the arm as stopped. Work done since the last record is kept in
    /// the totals.
    pub fn halt(&mut self, status: ArmStatus, message: String, samples: u64, evals: u64) {
        self.summary.status = status;
        self.summary.message = Some(message);
        self.summary.samples_drawn += samples;
        self.summary.function_evals += evals;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub experiment: String,
    pub version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub arms: Vec<ArmSummary>,
    pub steps: Vec<StepRecord>,
}

impl RunReport {
    pub fn arm(&self, name: &str) -> Option<&ArmSummary> {
        self.arms.iter().find(|a| a.name == name)
    }

    pub fn steps_of<'a>(&'a self, arm: &'a str) -> impl Iterator<Item = &'a StepRecord> + 'a {
        self.steps.iter().filter(move |s| s.arm == arm)
    }

    /// Copy with every timing field zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> RunReport {
        let mut r = self.clone();
        r.steps.iter_mut().for_each(|s| s.elapsed_ms = 0.0);
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(Error::Config(format!("unknown format `{other}` (expected csv or json)"))),
        }
    }
}

/// Field names of a CSV metrics file, in column order.
pub const CSV_HEADER: [&str; 8] = [
    "arm",
    "step",
    "objective",
    "metric",
    "grad_variance",
    "samples",
    "function_evals",
    "elapsed_ms",
];

/// CSV holds the step table; JSON holds the full report.
pub fn write_metrics(report: &RunReport, path: &Path, format: Format) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    match format {
        Format::Csv => {
            let mut csv = csv::WriterBuilder::new().has_headers(false).from_writer(&mut w);
            csv.write_record(CSV_HEADER).map_err(|e| csv_err(path, e))?;
            for s in &report.steps {
                csv.serialize(s).map_err(|e| csv_err(path, e))?;
            }
            csv.flush().map_err(|e| Error::io(path, e))?;
        }
        Format::Json => {
            serde_json::to_writer_pretty(&mut w, report).map_err(|e| Error::Malformed(e.to_string()))?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads back the step table written by [`write_metrics`] in either format.
pub fn read_metrics(path: &Path, format: Format) -> Result<Vec<StepRecord>> {
    match format {
        Format::Csv => {
            let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
            let header: Vec<String> = rdr
                .headers()
                .map_err(|e| csv_err(path, e))?
                .iter()
                .map(str::to_string)
                .collect();
            if header != CSV_HEADER {
                return Err(Error::Malformed(format!("{}: unexpected header {header:?}", path.display())));
            }
            rdr.deserialize().map(|r| r.map_err(|e| csv_err(path, e))).collect()
        }
        Format::Json => Ok(read_report(path)?.steps),
    }
}

pub fn read_report(path: &Path) -> Result<RunReport> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Malformed(format!("{}: {other:?}", path.display())),
    }
}
