//! Plot-ready CSV tables.

use std::path::Path;

use xaieval_core::eval::RunResult;
use xaieval_core::metrics::MetricRecord;

use crate::error::{Error, Result};
use crate::formats::write_bytes;

pub const RECORD_HEADER: [&str; 6] = ["case_id", "method", "criterion", "variant", "metric", "value"];
pub const AGGREGATE_HEADER: [&str; 9] = [
    "protocol", "method", "variant", "metric", "mean", "std", "n", "missing", "pass",
];

fn finish(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| Error::Usage(format!("csv buffer: {e}")))
}

/// One row per record; missing values are empty cells.
pub fn records_csv(records: &[MetricRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(RECORD_HEADER)?;
    for r in records {
        let value = r.value.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([
            r.case_id.as_str(),
            r.method.name(),
            r.criterion.name(),
            r.variant.as_str(),
            r.metric.name(),
            value.as_str(),
        ])?;
    }
    finish(w)
}

/// One row per aggregate row of every run.
pub fn aggregate_csv<'a>(runs: impl IntoIterator<Item = &'a RunResult>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(AGGREGATE_HEADER)?;
    for run in runs {
        let pass = run.pass.map(|p| p.to_string()).unwrap_or_default();
        for row in &run.rows {
            w.write_record([
                run.protocol.as_str(),
                run.method.name(),
                row.variant.as_str(),
                row.metric.name(),
                &row.mean.to_string(),
                &row.std.to_string(),
                &row.n.to_string(),
                &row.missing.to_string(),
                pass.as_str(),
            ])?;
        }
    }
    finish(w)
}

pub fn write_records(path: &Path, records: &[MetricRecord]) -> Result<()> {
    write_bytes(path, &records_csv(records)?)
}
