//! Metrics files. Column order is part of the external contract; new
//! metrics are appended at the end.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::federation::{CostSummary, RoundRecord};

pub const CSV_HEADER: [&str; 8] = [
    "round",
    "loss",
    "metric",
    "cumulative_upload",
    "cumulative_grad_evals",
    "local_seconds",
    "aggregate_seconds",
    "cumulative_download",
];

/// Per-round records as CSV text. The header is written even when there
/// are no rounds.
pub fn records_csv(records: &[RoundRecord]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.serialize(r)?;
    }
    Ok(w.into_inner().map_err(|e| e.into_error())?)
}

pub fn write_records_csv(path: &Path, records: &[RoundRecord]) -> Result<()> {
    write_file(path, &records_csv(records)?)
}

/// Parses a metrics CSV back into records.
pub fn read_records_csv(path: &Path) -> Result<Vec<RoundRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub root_seed: u64,
    pub sampled_per_round: usize,
    #[serde(flatten)]
    pub costs: CostSummary,
}

pub fn write_summary(path: &Path, summary: &RunSummary) -> Result<()> {
    let mut text = serde_json::to_vec_pretty(summary).map_err(std::io::Error::other)?;
    text.push(b'\n');
    write_file(path, &text)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_run_is_header_only() {
        let text = String::from_utf8(records_csv(&[]).unwrap()).unwrap();
        assert_eq!(text, CSV_HEADER.join(",") + "\n");
    }

    #[test]
    fn csv_roundtrip() {
        let rec = RoundRecord {
            round: 1,
            loss: 0.25,
            metric: f64::NAN,
            cumulative_upload: 10,
            cumulative_grad_evals: 4,
            local_seconds: 0.0,
            aggregate_seconds: 0.0,
            cumulative_download: 40,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        write_records_csv(&p, std::slice::from_ref(&rec)).unwrap();
        let back = read_records_csv(&p).unwrap();
        assert_eq!(back[0].loss, 0.25);
        assert!(back[0].metric.is_nan());
        assert_eq!(back[0].cumulative_download, 40);
    }
}
