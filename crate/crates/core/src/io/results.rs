//! Append-only results log: one JSON object per line.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::MetricsReport;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub run: String,
    /// Stage index, or `None` for run-level metrics.
    pub stage: Option<usize>,
    pub metric: String,
    pub value: f64,
    pub config_digest: String,
}

impl ResultRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("record serialises")
    }

    pub fn parse(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| Error::Format {
            offset: e.column().saturating_sub(1) as u64,
            msg: format!("invalid results record: {e}"),
        })
    }
}

/// Records for every stage metric and the run summary of a report.
pub fn report_records(run: &str, report: &MetricsReport) -> Vec<ResultRecord> {
    let rec = |stage, metric: &str, value| ResultRecord {
        run: run.to_string(),
        stage,
        metric: metric.to_string(),
        value,
        config_digest: report.config_digest.clone(),
    };
    let mut out = Vec::new();
    for s in &report.stages {
        out.push(rec(Some(s.stage), "accuracy", s.accuracy));
        out.push(rec(Some(s.stage), "routing_accuracy", s.routing_accuracy));
        out.push(rec(Some(s.stage), "zero_shot_accuracy", s.zero_shot_accuracy));
    }
    out.push(rec(None, "average_accuracy", report.average_accuracy));
    out.push(rec(None, "last_accuracy", report.last_accuracy));
    out.push(rec(None, "max_forgetting", report.max_forgetting));
    out
}

pub fn append_records(path: &Path, records: &[ResultRecord]) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut buf = String::new();
    for r in records {
        buf.push_str(&r.to_line());
        buf.push('\n');
    }
    f.write_all(buf.as_bytes())?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<ResultRecord>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(ResultRecord::parse)
        .collect()
}
