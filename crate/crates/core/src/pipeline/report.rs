//! JSON-lines run report.

use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::stage2::{GateRefresh, Stage2Epoch};
use crate::dino::Stage1Epoch;
use crate::error::Result;
use crate::synthworld::Modality;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReportRow {
    Stage1Epoch {
        iteration: usize,
        modality: Modality,
        #[serde(flatten)]
        row: Stage1Epoch,
    },
    Stage2Epoch {
        iteration: usize,
        #[serde(flatten)]
        row: Stage2Epoch,
    },
    Gmm {
        iteration: usize,
        #[serde(flatten)]
        row: GateRefresh,
    },
    Metric {
        iteration: usize,
        metric: String,
        value: f64,
        modality: String,
        config_hash: String,
    },
}

impl ReportRow {
    pub fn iteration(&self) -> usize {
        match self {
            ReportRow::Stage1Epoch { iteration, .. }
            | ReportRow::Stage2Epoch { iteration, .. }
            | ReportRow::Gmm { iteration, .. }
            | ReportRow::Metric { iteration, .. } => *iteration,
        }
    }

    pub fn epoch(&self) -> Option<usize> {
        match self {
            ReportRow::Stage1Epoch { row, .. } => Some(row.epoch),
            ReportRow::Stage2Epoch { row, .. } => Some(row.epoch),
            ReportRow::Gmm { row, .. } => Some(row.epoch),
            ReportRow::Metric { .. } => None,
        }
    }

    /// The value of a metric row with this name and modality.
    pub fn metric(&self, name: &str, modality: &str) -> Option<f64> {
        match self {
            ReportRow::Metric { metric, value, modality: m, .. } if metric == name && m == modality => Some(*value),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportLine {
    pub version: u32,
    /// Seconds since the run started; not reproducible.
    pub wall_time: f64,
    #[serde(flatten)]
    pub row: ReportRow,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub lines: Vec<ReportLine>,
    started: Instant,
}

impl Default for RunReport {
    fn default() -> Self {
        Self { lines: Vec::new(), started: Instant::now() }
    }
}

impl RunReport {
    pub fn since(started: Instant) -> Self {
        Self { lines: Vec::new(), started }
    }

    pub fn push(&mut self, row: ReportRow) {
        let wall_time = self.started.elapsed().as_secs_f64();
        self.lines.push(ReportLine { version: REPORT_SCHEMA_VERSION, wall_time, row });
    }

    pub fn extend(&mut self, rows: impl IntoIterator<Item = ReportRow>) {
        rows.into_iter().for_each(|r| self.push(r));
    }

    pub fn rows(&self) -> impl Iterator<Item = &ReportRow> {
        self.lines.iter().map(|l| &l.row)
    }

    /// First metric value for `(iteration, name, modality)`.
    pub fn metric(&self, iteration: usize, name: &str, modality: &str) -> Option<f64> {
        self.rows().filter(|r| r.iteration() == iteration).find_map(|r| r.metric(name, modality))
    }

    pub fn append_to(&self, path: &Path, from: usize) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::OpenOptions::new().create(true).append(true).open(path)?);
        for line in &self.lines[from..] {
            serde_json::to_writer(&mut f, line)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Vec<ReportLine>> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut out = Vec::new();
        for line in f.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                out.push(serde_json::from_str(&line)?);
            }
        }
        Ok(out)
    }
}

/// Report lines with wall-clock fields removed, for reproducibility checks.
pub fn without_wall_time(lines: &[ReportLine]) -> Vec<ReportRow> {
    lines.iter().map(|l| l.row.clone()).collect()
}
